use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use catdif_core::cat;
use catdif_core::config::{self, StudyConfig};
use catdif_core::error::Error;
use catdif_core::glmm;
use catdif_core::harness::{self, Study};
use catdif_core::model::ModelName;
use catdif_core::pool;
use catdif_core::prep::{self, CleaningOptions, ItemFrame};
use catdif_core::report::{self, IccRow};

#[derive(Parser)]
#[command(name = "catdif", version, about = "Simulate CAT administrations and screen items for DIF")]
struct Cli {
    /// Increase log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one replication of one cell and write the pool and administration logs.
    Simulate(SimulateArgs),
    /// Turn administration logs into per-item frames.
    Clean(CleanArgs),
    /// Fit DIF models to per-item frames.
    Fit(FitArgs),
    /// Run a full simulation study and write its tables.
    Study(StudyArgs),
    /// Fit the empty model to every frame and report interval ICCs.
    ScreenIcc(ScreenArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Study configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Cell index in the study grid.
    #[arg(long, default_value_t = 0)]
    cell: usize,
    #[arg(long, default_value_t = 0)]
    replication: usize,
}

#[derive(Args)]
struct CleanArgs {
    /// logs.csv as written by `simulate`.
    #[arg(long)]
    logs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Interval grid and fitted models are taken from this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// frames.csv as written by `clean`.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// pool.csv as written by `simulate`; marks contaminated items.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "M6,S1,S2,S3")]
    models: Vec<ModelName>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "CATDIF_WORKERS")]
    workers: Option<usize>,
    /// Also write wall-clock timings to timings.json.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct ScreenArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Parse(_) | Error::UnknownTerm(_) | Error::InvalidItem { .. } => 2,
        Error::Io(_) | Error::Csv(_) => 3,
        _ => 4,
    }
}

fn load_config(args: &ConfigArgs) -> Result<StudyConfig, Error> {
    let mut cfg = config::parse_config(&args.config).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", args.config.display())),
        e => e,
    })?;
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    Ok(cfg)
}

fn read_frames(path: &Path) -> Result<BTreeMap<String, ItemFrame>, Error> {
    prep::read_frames_csv(BufReader::new(File::open(path)?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config)?;
    let study = Study::new(cfg)?;
    let cell = study
        .cells
        .get(args.cell)
        .ok_or_else(|| Error::Config(format!("cell {} out of range (grid has {})", args.cell, study.cells.len())))?;
    if args.replication >= study.cfg.n_replications {
        return Err(Error::Config(format!("replication {} out of range", args.replication)));
    }
    info!("simulating cell {} replication {}", cell.id(), args.replication);
    let (run, focal) = study.simulate(cell, args.replication)?;
    fs::create_dir_all(&args.out)?;
    pool::write_pool_csv(&study.pool, &focal, BufWriter::new(File::create(args.out.join("pool.csv"))?))?;
    cat::write_logs_csv(&run.logs, BufWriter::new(File::create(args.out.join("logs.csv"))?))?;
    write_json(&args.out.join("precision.json"), &run.precision)
}

fn clean(args: CleanArgs) -> Result<(), Error> {
    let opts = match &args.config {
        Some(path) => {
            let cfg = load_config(&ConfigArgs { config: path.clone(), seed: None })?;
            let study = Study::new(cfg)?;
            study.cleaning()
        }
        None => CleaningOptions::default(),
    };
    let logs = cat::read_logs_csv(BufReader::new(File::open(&args.logs)?))?;
    let (frames, drops) = prep::build_frames(&logs, &opts);
    info!("{} items retained, {} dropped", frames.len(), drops.dropped());
    fs::create_dir_all(&args.out)?;
    prep::write_frames_csv(&frames, BufWriter::new(File::create(args.out.join("frames.csv"))?))?;
    write_json(&args.out.join("drops.json"), &drops)
}

fn fit(args: FitArgs) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1] (got {})", args.alpha)));
    }
    let frames = read_frames(&args.frames)?;
    let contaminated: Vec<String> = match &args.pool {
        Some(path) => {
            let (_, focal) = pool::read_pool_csv(BufReader::new(File::open(path)?))?;
            focal.contaminated_ids().map(str::to_string).collect()
        }
        None => Vec::new(),
    };
    let cell = args.frames.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rows = Vec::new();
    for (id, frame) in &frames {
        let dif = contaminated.contains(id);
        for &model in &args.models {
            let rec = harness::fit_model(frame, model, dif, args.alpha);
            if let Some(e) = &rec.error {
                warn!("{id} {model}: {e}");
            }
            rows.push(report::fit_row(&cell, 0, &rec));
        }
    }
    fs::create_dir_all(&args.out)?;
    let file = BufWriter::new(File::create(args.out.join("fits.csv"))?);
    report::write_csv(&rows, &report::FIT_HEADER, file)
}

fn study(args: StudyArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config)?;
    if args.workers == Some(0) {
        return Err(Error::Config("workers must be positive".into()));
    }
    fs::create_dir_all(&args.out)?;
    let rep = harness::run_study(cfg, args.workers)?;
    for c in &rep.conditions {
        for (r, e) in &c.failed_replications {
            warn!("{} replication {r} failed: {e}", c.cell.id());
        }
    }
    report::emit_tables(&rep, &args.out)?;
    report::emit_plot_data(&rep, &args.out)?;
    if args.timings {
        report::emit_timings(&rep, &args.out)?;
    }
    info!("study finished in {:.1} s", rep.timings.total_seconds);
    Ok(())
}

fn screen_icc(args: ScreenArgs) -> Result<(), Error> {
    let frames = read_frames(&args.frames)?;
    let screen = glmm::icc_screen(&frames);
    let rows: Vec<IccRow> = screen
        .rho
        .iter()
        .map(|(id, r)| IccRow { item_id: id.clone(), rho: Some(*r) })
        .chain(screen.failed.iter().map(|id| IccRow { item_id: id.clone(), rho: None }))
        .collect();
    fs::create_dir_all(&args.out)?;
    let file = BufWriter::new(File::create(args.out.join("icc_histogram.csv"))?);
    report::write_csv(&rows, &["item_id", "rho"], file)?;
    write_json(&args.out.join("icc_summary.json"), &screen.summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Clean(a) => clean(a),
        Command::Fit(a) => fit(a),
        Command::Study(a) => study(a),
        Command::ScreenIcc(a) => screen_icc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
