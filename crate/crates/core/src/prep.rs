//! Turning administration logs into per-item nested analysis frames.
//!
//! Each response to a studied item becomes a level-1 row; rows are clustered
//! by the interval of the provisional estimate that preceded the item's
//! selection. Cleaning removes polytomous items, first-slot responses, and
//! items a two-level model cannot be fitted to.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cat::AdministrationLog;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for IntervalGrid {
    fn default() -> Self {
        IntervalGrid {
            lo: -4.0,
            hi: 4.0,
            step: 0.1,
        }
    }
}

impl IntervalGrid {
    pub fn n_points(&self) -> usize {
        ((self.hi - self.lo) / self.step).round() as usize + 1
    }

    pub fn point(&self, j: usize) -> f64 {
        self.lo + (j - 1) as f64 * self.step
    }

    /// 1-based index of the nearest grid point; exact midpoints go up.
    pub fn bin(&self, theta_s: f64) -> usize {
        let x = (theta_s - self.lo) / self.step;
        // Slack so decimal midpoints such as 0.05 tie upward despite rounding.
        let j = (x + 0.5 + 1e-9).floor() + 1.0;
        j.clamp(1.0, self.n_points() as f64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub y: u8,
    pub g: u8,
    pub theta_k: f64,
    pub theta_s: f64,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemFrame {
    pub item_id: String,
    pub rows: Vec<FrameRow>,
    pub cluster_sizes: BTreeMap<usize, usize>,
}

impl ItemFrame {
    pub fn new(item_id: impl Into<String>, rows: Vec<FrameRow>) -> Self {
        let mut cluster_sizes = BTreeMap::new();
        for r in &rows {
            *cluster_sizes.entry(r.j).or_insert(0) += 1;
        }
        ItemFrame {
            item_id: item_id.into(),
            rows,
            cluster_sizes,
        }
    }

    pub fn n_intervals(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cluster size `n_j` of the cluster a row belongs to.
    pub fn cluster_size_of(&self, row: &FrameRow) -> usize {
        self.cluster_sizes[&row.j]
    }

    fn has_both_responses(&self) -> bool {
        let ones = self.rows.iter().filter(|r| r.y == 1).count();
        ones > 0 && ones < self.rows.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub total_administered: usize,
    /// Polytomous items.
    pub step1: BTreeSet<String>,
    /// Items left with no rows once first-slot responses are discarded.
    pub step2: BTreeSet<String>,
    /// First-slot rows discarded.
    pub step2_rows: usize,
    /// Items observed in a single interval.
    pub step3a: BTreeSet<String>,
    /// Items with a single observed response value.
    pub step3b: BTreeSet<String>,
    /// Items with no more rows than random effects.
    pub step3c: BTreeSet<String>,
}

impl DropReport {
    pub fn dropped(&self) -> usize {
        self.step1.len() + self.step2.len() + self.step3a.len() + self.step3b.len() + self.step3c.len()
    }

    pub fn dropped_fraction(&self) -> f64 {
        if self.total_administered == 0 {
            0.0
        } else {
            self.dropped() as f64 / self.total_administered as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleaningOptions {
    pub grid: IntervalGrid,
    /// Random effects per cluster in the largest model to be fitted.
    pub random_effects: usize,
    /// Items to discard as polytomous.
    pub polytomous: BTreeSet<String>,
}

impl Default for CleaningOptions {
    fn default() -> Self {
        CleaningOptions {
            grid: IntervalGrid::default(),
            random_effects: 2,
            polytomous: BTreeSet::new(),
        }
    }
}

pub fn build_frames(
    logs: &[AdministrationLog],
    opts: &CleaningOptions,
) -> (BTreeMap<String, ItemFrame>, DropReport) {
    let mut report = DropReport::default();
    let mut administered: BTreeSet<&str> = BTreeSet::new();
    let mut rows: BTreeMap<&str, Vec<FrameRow>> = BTreeMap::new();

    for log in logs {
        for slot in &log.slots {
            administered.insert(&slot.item_id);
            if opts.polytomous.contains(&slot.item_id) {
                continue;
            }
            if slot.k == 1 {
                report.step2_rows += 1;
                continue;
            }
            rows.entry(&slot.item_id).or_default().push(FrameRow {
                y: u8::from(slot.response),
                g: log.group,
                theta_k: log.theta_final,
                theta_s: slot.theta_prev,
                j: opts.grid.bin(slot.theta_prev),
            });
        }
    }
    report.total_administered = administered.len();

    let mut frames = BTreeMap::new();
    for id in administered {
        if opts.polytomous.contains(id) {
            report.step1.insert(id.to_string());
            continue;
        }
        let Some(item_rows) = rows.remove(id) else {
            report.step2.insert(id.to_string());
            continue;
        };
        let frame = ItemFrame::new(id, item_rows);
        if frame.n_intervals() < 2 {
            report.step3a.insert(id.to_string());
        } else if !frame.has_both_responses() {
            report.step3b.insert(id.to_string());
        } else if frame.len() <= opts.random_effects * frame.n_intervals() {
            report.step3c.insert(id.to_string());
        } else {
            frames.insert(id.to_string(), frame);
        }
    }
    (frames, report)
}

/// Keep frames with at least `min_intervals` clusters and `min_n` rows.
pub fn apply_strict_filter(
    frames: &BTreeMap<String, ItemFrame>,
    min_intervals: usize,
    min_n: usize,
) -> BTreeMap<String, ItemFrame> {
    frames
        .iter()
        .filter(|(_, f)| f.n_intervals() >= min_intervals && f.len() >= min_n)
        .map(|(k, f)| (k.clone(), f.clone()))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameCsvRow {
    item_id: String,
    y: u8,
    g: u8,
    #[serde(rename = "theta_K")]
    theta_k: f64,
    theta_s: f64,
    interval_j: usize,
}

pub fn write_frames_csv<W: Write>(frames: &BTreeMap<String, ItemFrame>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for frame in frames.values() {
        for r in &frame.rows {
            wtr.serialize(FrameCsvRow {
                item_id: frame.item_id.clone(),
                y: r.y,
                g: r.g,
                theta_k: r.theta_k,
                theta_s: r.theta_s,
                interval_j: r.j,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_frames_csv<R: Read>(input: R) -> Result<BTreeMap<String, ItemFrame>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut rows: BTreeMap<String, Vec<FrameRow>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: FrameCsvRow = row?;
        rows.entry(row.item_id).or_default().push(FrameRow {
            y: row.y,
            g: row.g,
            theta_k: row.theta_k,
            theta_s: row.theta_s,
            j: row.interval_j,
        });
    }
    Ok(rows
        .into_iter()
        .map(|(id, r)| (id.clone(), ItemFrame::new(id, r)))
        .collect())
}
