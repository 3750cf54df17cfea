use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use catdif_core::config::StudyConfig;
use catdif_core::harness::{run_study, StudyReport};
use catdif_core::model::ModelName;
use catdif_core::report::{self, DropRow, FitRow, IccRow, IntervalRow, Meta, PrecisionRow, RateRow, Type1ByModelRow};

fn tiny_study_one() -> StudyReport {
    let mut cfg = StudyConfig::new(1);
    cfg.n_replications = 2;
    cfg.n_examinees = 200;
    cfg.pool.n_items = 200;
    cfg.models = vec![ModelName::M1, ModelName::S1];
    cfg.min_item_replications = 1;
    cfg.base_seed = 11;
    run_study(cfg, Some(1)).unwrap()
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn study_one_tables() {
    let rep = tiny_study_one();
    assert_eq!(rep.conditions.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    report::emit_tables(&rep, dir.path()).unwrap();
    report::emit_plot_data(&rep, dir.path()).unwrap();

    let type1: Vec<RateRow> = report::read_csv_file(&dir.path().join("type1.csv")).unwrap();
    assert_eq!(type1.len(), 8 * 2);
    let power_text = fs::read_to_string(dir.path().join("power.csv")).unwrap();
    assert_eq!(power_text.lines().count(), 1);
    assert!(power_text.starts_with("cell,method,length,exposure,dif_parameter,dif_proportion,model,mean,sd,n_items"));

    let drops_text = fs::read_to_string(dir.path().join("drops.csv")).unwrap();
    let header = drops_text.lines().next().unwrap();
    assert!(header.ends_with(
        "replications,proportion_mean,proportion_sd,count_mean,count_sd,count_min,count_max,total_mean,total_sd,total_min,total_max"
    ));
    let drops: Vec<DropRow> = report::read_csv_file(&dir.path().join("drops.csv")).unwrap();
    assert_eq!(drops.len(), 8);
    let precision: Vec<PrecisionRow> = report::read_csv_file(&dir.path().join("precision.csv")).unwrap();
    assert!(precision.iter().all(|p| p.mse_mean.is_some() && p.replications == 2));

    let by_model: Vec<Type1ByModelRow> = report::read_csv_file(&dir.path().join("type1_by_model.csv")).unwrap();
    assert_eq!(by_model.len(), 16);

    let diag = rep.diagnostics.as_ref().unwrap();
    let icc: Vec<IccRow> = report::read_csv_file(&dir.path().join("icc_histogram.csv")).unwrap();
    assert_eq!(icc.len(), diag.frame_sizes.len());
    let bars: Vec<IntervalRow> = report::read_csv_file(&dir.path().join("interval_barplot.csv")).unwrap();
    for (id, &size) in &diag.frame_sizes {
        let total: usize = bars.iter().filter(|b| &b.item_id == id).map(|b| b.count).sum();
        assert_eq!(total, size, "{id}");
    }

    let fits: Vec<FitRow> = report::read_csv_file(&dir.path().join("fits.csv")).unwrap();
    let expected: usize = rep.conditions.iter().map(|c| c.fits.len()).sum();
    assert_eq!(fits.len(), expected);

    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta.config, rep.config);
    assert_eq!(meta.cells.len(), 8);
    assert!(!dir.path().join("timings.json").exists());
}

#[test]
fn outputs_are_reproducible_and_reparseable() {
    let a = tiny_study_one();
    let b = tiny_study_one();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (rep, dir) in [(&a, &da), (&b, &db)] {
        report::emit_tables(rep, dir.path()).unwrap();
        report::emit_plot_data(rep, dir.path()).unwrap();
    }
    assert_eq!(read_tree(da.path()), read_tree(db.path()));

    // Re-serializing what the readers return gives the same bytes.
    let rows: Vec<RateRow> = report::read_csv_file(&da.path().join("type1.csv")).unwrap();
    let mut buf = Vec::new();
    report::write_csv(&rows, &[], &mut buf).unwrap();
    assert_eq!(buf, fs::read(da.path().join("type1.csv")).unwrap());
    let rows: Vec<FitRow> = report::read_csv_file(&da.path().join("fits.csv")).unwrap();
    let mut buf = Vec::new();
    report::write_csv(&rows, &[], &mut buf).unwrap();
    assert_eq!(buf, fs::read(da.path().join("fits.csv")).unwrap());
}

#[test]
fn single_replication_leaves_spread_missing() {
    let mut cfg = StudyConfig::new(2);
    cfg.n_replications = 1;
    cfg.n_examinees = 200;
    cfg.pool.n_items = 100;
    cfg.estimators = vec![catdif_core::cat::Estimator::Eap];
    cfg.test_lengths = vec![25];
    cfg.exposure_rates = vec![0.33];
    cfg.models = vec![ModelName::S3];
    cfg.min_item_replications = 1;
    let rep = run_study(cfg, Some(1)).unwrap();
    assert_eq!(rep.conditions.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    report::emit_tables(&rep, dir.path()).unwrap();
    let precision: Vec<PrecisionRow> = report::read_csv_file(&dir.path().join("precision.csv")).unwrap();
    assert!(precision.iter().all(|p| p.bias_sd.is_none() && p.bias_mean.is_some()));
    let power: Vec<RateRow> = report::read_csv_file(&dir.path().join("power.csv")).unwrap();
    assert_eq!(power.len(), 4);
    report::emit_timings(&rep, dir.path()).unwrap();
    assert!(dir.path().join("timings.json").exists());
}
