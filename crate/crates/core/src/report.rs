//! Tables, plot data and run metadata written from a [`StudyReport`].
//!
//! Every file is CSV except `meta.json`. Missing values are written as `NA`.
//! Output depends only on the report contents, so identical runs produce
//! identical files; wall-clock timings go to a separate `timings.json` only
//! when asked for.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Result;
use crate::harness::{Cell, ConditionResult, FitRecord, Spread, StudyReport};
use crate::model::ModelName;

fn fmt3<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => s.serialize_str(&format!("{x:.3}")),
        _ => s.serialize_str("NA"),
    }
}

fn fmt6<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => s.serialize_str(&format!("{x:.6}")),
        _ => s.serialize_str("NA"),
    }
}

fn parse_na<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    let s = String::deserialize(d)?;
    if s == "NA" || s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(serde::de::Error::custom)
}

fn opt(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Columns identifying a design cell.
struct CellColumns {
    cell: String,
    method: String,
    length: usize,
    exposure: String,
    dif_parameter: String,
    dif_proportion: String,
}

impl CellColumns {
    fn of(cell: &Cell) -> Self {
        CellColumns {
            cell: cell.id(),
            method: cell.estimator.to_string(),
            length: cell.test_length,
            exposure: format!("{:.2}", cell.max_exposure),
            dif_parameter: cell.dif.map_or("NA".into(), |d| d.parameter.to_string()),
            dif_proportion: cell.dif.map_or("NA".into(), |d| format!("{:.1}", d.proportion)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub cell: String,
    pub method: String,
    pub length: usize,
    pub exposure: String,
    pub dif_parameter: String,
    pub dif_proportion: String,
    pub replications: usize,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub bias_mean: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub bias_sd: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub mse_mean: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub mse_sd: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub correlation_mean: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub correlation_sd: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub csem_mean: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub csem_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub cell: String,
    pub method: String,
    pub length: usize,
    pub exposure: String,
    pub dif_parameter: String,
    pub dif_proportion: String,
    pub model: ModelName,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub mean: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub sd: Option<f64>,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRow {
    pub cell: String,
    pub method: String,
    pub length: usize,
    pub exposure: String,
    pub dif_parameter: String,
    pub dif_proportion: String,
    pub replications: usize,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub proportion_mean: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub proportion_sd: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub count_mean: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub count_sd: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub count_min: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub count_max: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub total_mean: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub total_sd: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub total_min: Option<f64>,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub total_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub cell: String,
    pub replication: usize,
    pub item_id: String,
    pub model: ModelName,
    pub contaminated: u8,
    pub converged: u8,
    pub flagged: u8,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub estimate_g: Option<f64>,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub se_g: Option<f64>,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub p_g: Option<f64>,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub deviance: Option<f64>,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub aic: Option<f64>,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub bic: Option<f64>,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub tau0_sq: Option<f64>,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub tau1_sq: Option<f64>,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub tau10: Option<f64>,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub icc: Option<f64>,
    /// Semicolon-separated, in model term order.
    pub coefficients: String,
    pub std_errors: String,
    pub n_level1: usize,
    pub n_level2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Type1ByModelRow {
    pub cell: String,
    pub model: ModelName,
    #[serde(serialize_with = "fmt3", deserialize_with = "parse_na")]
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccRow {
    pub item_id: String,
    #[serde(serialize_with = "fmt6", deserialize_with = "parse_na")]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub item_id: String,
    pub interval_j: usize,
    pub count: usize,
}

fn spread_cols(s: Option<&Spread>) -> [Option<f64>; 4] {
    match s {
        Some(s) => [Some(s.mean), s.sd, Some(s.min), Some(s.max)],
        None => [None; 4],
    }
}

pub fn precision_rows(report: &StudyReport) -> Vec<PrecisionRow> {
    report
        .conditions
        .iter()
        .map(|c| {
            let p = c.precision.as_ref();
            let ms = |f: fn(&crate::harness::PrecisionAggregate) -> &Spread| {
                p.map_or((None, None), |p| (Some(f(p).mean), f(p).sd))
            };
            let (bias_mean, bias_sd) = ms(|p| &p.bias);
            let (mse_mean, mse_sd) = ms(|p| &p.mse);
            let (correlation_mean, correlation_sd) = ms(|p| &p.correlation);
            let (csem_mean, csem_sd) = ms(|p| &p.csem);
            let cc = CellColumns::of(&c.cell);
            PrecisionRow {
                cell: cc.cell,
                method: cc.method,
                length: cc.length,
                exposure: cc.exposure,
                dif_parameter: cc.dif_parameter,
                dif_proportion: cc.dif_proportion,
                replications: c.replications,
                bias_mean,
                bias_sd,
                mse_mean,
                mse_sd,
                correlation_mean,
                correlation_sd,
                csem_mean,
                csem_sd,
            }
        })
        .collect()
}

fn rate_rows(report: &StudyReport, power: bool) -> Vec<RateRow> {
    let mut rows = Vec::new();
    for c in &report.conditions {
        let rates = if power { &c.power } else { &c.type1 };
        for r in rates {
            let cc = CellColumns::of(&c.cell);
            rows.push(RateRow {
                cell: cc.cell,
                method: cc.method,
                length: cc.length,
                exposure: cc.exposure,
                dif_parameter: cc.dif_parameter,
                dif_proportion: cc.dif_proportion,
                model: r.model,
                mean: r.mean,
                sd: r.sd,
                n_items: r.n_items,
            });
        }
    }
    rows
}

pub fn drop_rows(report: &StudyReport) -> Vec<DropRow> {
    report
        .conditions
        .iter()
        .map(|c: &ConditionResult| {
            let d = c.drops.as_ref();
            let [pm, ps, _, _] = spread_cols(d.map(|d| &d.proportion));
            let [cm, cs, cmin, cmax] = spread_cols(d.map(|d| &d.count));
            let [tm, ts, tmin, tmax] = spread_cols(d.map(|d| &d.total));
            let cc = CellColumns::of(&c.cell);
            DropRow {
                cell: cc.cell,
                method: cc.method,
                length: cc.length,
                exposure: cc.exposure,
                dif_parameter: cc.dif_parameter,
                dif_proportion: cc.dif_proportion,
                replications: c.replications,
                proportion_mean: pm,
                proportion_sd: ps,
                count_mean: cm,
                count_sd: cs,
                count_min: cmin,
                count_max: cmax,
                total_mean: tm,
                total_sd: ts,
                total_min: tmin,
                total_max: tmax,
            }
        })
        .collect()
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| if v.is_finite() { format!("{v:.6}") } else { "NA".into() })
        .collect::<Vec<_>>()
        .join(";")
}

pub const FIT_HEADER: [&str; 21] = [
    "cell", "replication", "item_id", "model", "contaminated", "converged", "flagged", "estimate_g", "se_g", "p_g",
    "deviance", "aic", "bic", "tau0_sq", "tau1_sq", "tau10", "icc", "coefficients", "std_errors", "n_level1",
    "n_level2",
];

/// One `fits.csv` row.
pub fn fit_row(cell: &str, replication: usize, f: &FitRecord) -> FitRow {
    FitRow {
        cell: cell.to_string(),
        replication,
        item_id: f.item_id.clone(),
        model: f.model,
        contaminated: u8::from(f.contaminated),
        converged: u8::from(f.converged),
        flagged: u8::from(f.flagged),
        estimate_g: opt(f.estimate_g),
        se_g: opt(f.se_g),
        p_g: opt(f.p_g),
        deviance: opt(f.deviance),
        aic: opt(f.aic),
        bic: opt(f.bic),
        tau0_sq: f.tau0_sq,
        tau1_sq: f.tau1_sq,
        tau10: f.tau10,
        icc: f.icc,
        coefficients: join(&f.coefficients),
        std_errors: join(&f.std_errors),
        n_level1: f.n_level1,
        n_level2: f.n_level2,
    }
}

pub fn fit_rows(report: &StudyReport) -> Vec<FitRow> {
    report
        .conditions
        .iter()
        .flat_map(|c| {
            let id = c.cell.id();
            c.fits.iter().map(move |(rep, f)| fit_row(&id, *rep, f))
        })
        .collect()
}

/// Serialize `rows` as CSV; the header is written even with no rows.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], header: &[&str], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    if rows.is_empty() {
        wtr.write_record(header)?;
    } else {
        for r in rows {
            wtr.serialize(r)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn read_csv_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_csv(fs::File::open(path)?)
}

const CELL_HEADER: [&str; 6] = ["cell", "method", "length", "exposure", "dif_parameter", "dif_proportion"];

fn header(extra: &[&'static str]) -> Vec<&'static str> {
    CELL_HEADER.iter().chain(extra).copied().collect()
}

fn write_file<T: Serialize>(dir: &Path, name: &str, rows: &[T], header: &[&str]) -> Result<PathBuf> {
    let path = dir.join(name);
    let file = fs::File::create(&path)?;
    write_csv(rows, header, std::io::BufWriter::new(file))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub cell: String,
    pub replications: usize,
    pub replication_seeds: Vec<u64>,
    pub failed_replications: Vec<(usize, String)>,
    pub annotations: Vec<String>,
}

/// Run metadata: configuration echo, version and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: String,
    pub config: crate::config::StudyConfig,
    pub pool_seed: u64,
    pub cells: Vec<CellMeta>,
}

pub fn meta(report: &StudyReport) -> Meta {
    Meta {
        version: report.version.clone(),
        config: report.config.clone(),
        pool_seed: report.pool_seed,
        cells: report
            .conditions
            .iter()
            .map(|c| CellMeta {
                cell: c.cell.id(),
                replications: c.replications,
                replication_seeds: c.seeds.clone(),
                failed_replications: c.failed_replications.clone(),
                annotations: c.annotations.clone(),
            })
            .collect(),
    }
}

/// Write precision, Type-I, power, drop and fit tables plus `meta.json`.
pub fn emit_tables(report: &StudyReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let rate_header = header(&["model", "mean", "sd", "n_items"]);
    let stats = [
        "bias_mean", "bias_sd", "mse_mean", "mse_sd", "correlation_mean", "correlation_sd", "csem_mean", "csem_sd",
    ];
    let drops = [
        "proportion_mean", "proportion_sd", "count_mean", "count_sd", "count_min", "count_max", "total_mean",
        "total_sd", "total_min", "total_max",
    ];
    let mut precision_header = header(&["replications"]);
    precision_header.extend(stats);
    let mut drop_header = header(&["replications"]);
    drop_header.extend(drops);
    let mut out = vec![
        write_file(dir, "precision.csv", &precision_rows(report), &precision_header)?,
        write_file(dir, "type1.csv", &rate_rows(report, false), &rate_header)?,
        write_file(dir, "power.csv", &rate_rows(report, true), &rate_header)?,
        write_file(dir, "drops.csv", &drop_rows(report), &drop_header)?,
        write_file(dir, "fits.csv", &fit_rows(report), &FIT_HEADER)?,
    ];
    let path = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&meta(report))?;
    text.push('\n');
    fs::write(&path, text)?;
    out.push(path);
    Ok(out)
}

pub fn emit_timings(report: &StudyReport, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("timings.json");
    fs::write(&path, serde_json::to_string_pretty(&report.timings)?)?;
    Ok(path)
}

pub fn type1_by_model_rows(report: &StudyReport) -> Vec<Type1ByModelRow> {
    report
        .conditions
        .iter()
        .flat_map(|c| {
            c.type1.iter().map(move |r| Type1ByModelRow {
                cell: c.cell.id(),
                model: r.model,
                rate: r.mean,
            })
        })
        .collect()
}

/// Long-format data for the Type-I comparison, ICC histogram and interval
/// bar plot.
pub fn emit_plot_data(report: &StudyReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let (icc, intervals): (Vec<IccRow>, Vec<IntervalRow>) = match &report.diagnostics {
        Some(d) => (
            d.rho
                .iter()
                .map(|(id, r)| IccRow { item_id: id.clone(), rho: Some(*r) })
                .chain(d.failed.iter().map(|id| IccRow { item_id: id.clone(), rho: None }))
                .collect(),
            d.intervals
                .iter()
                .flat_map(|(id, m)| {
                    m.iter().map(move |(&j, &n)| IntervalRow { item_id: id.clone(), interval_j: j, count: n })
                })
                .collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    Ok(vec![
        write_file(dir, "type1_by_model.csv", &type1_by_model_rows(report), &["cell", "model", "rate"])?,
        write_file(dir, "icc_histogram.csv", &icc, &["item_id", "rho"])?,
        write_file(dir, "interval_barplot.csv", &intervals, &["item_id", "interval_j", "count"])?,
    ])
}
