//! Command-line front end. Every command reads the run configuration
//! (`--config`, toy defaults otherwise), applies flag overrides, and echoes
//! the effective configuration into its output directory.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Failures print one line `egonn: <usage|data|numerical>: <reason>` on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{parse_list, RunConfig};
use crate::data::{generate_traversal, generate_world, load_cloud, Traversal};
use crate::diagnostics::{gradient_suite, results_csv};
use crate::error::{Error, Result};
use crate::model::{select_keypoints, Branches, EgoNN};
use crate::pipeline::{evaluate_pose, localize, localizations_csv, parse_localizations, LocalizeOptions, Selection};
use crate::retrieval::{evaluate_recall, DescriptorDB};
use crate::trainer::{TrainSet, Trainer};

pub const THREADS_ENV: &str = "EGONN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "egonn", version, about = "Sparse-voxel LiDAR place recognition and relocalization")]
pub struct Cli {
    /// Run configuration (TOML with sections net, loss, train, data, eval).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random source; overrides train.seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory, or output file for build-db and the evaluators.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Keypoints per cloud (overrides eval.keypoints).
    #[arg(long, global = true, value_name = "N")]
    pub keypoints: Option<usize>,
    /// Comma-separated Recall@N values (overrides eval.top_n).
    #[arg(long = "top-n", global = true, value_name = "N")]
    pub top_n: Option<String>,
    /// Comma-separated recall distance thresholds in meters.
    #[arg(long, global = true, value_name = "LIST")]
    pub thresholds: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a world and write training, database and query traversals.
    GenerateData,
    /// Train on the train_* traversals of a generated data directory.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Write one feature file per cloud of a traversal.
    Extract {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        traversal: PathBuf,
    },
    /// Build a global descriptor database from a traversal.
    BuildDb {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        traversal: PathBuf,
    },
    /// Top-1 retrieval followed by keypoint registration for every query.
    Localize {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        db: PathBuf,
        #[arg(long, value_name = "DIR")]
        traversal: PathBuf,
        /// Keypoint selection: salient, random or centers.
        #[arg(long)]
        selection: Option<Selection>,
    },
    /// Recall@N of a query traversal against a database.
    EvaluateRetrieval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        db: PathBuf,
        #[arg(long, value_name = "DIR")]
        traversal: PathBuf,
    },
    /// Pose success rate and errors of a localize output.
    EvaluatePose {
        #[arg(long, value_name = "PATH")]
        localization: PathBuf,
        #[arg(long, value_name = "PATH")]
        db: PathBuf,
        #[arg(long, value_name = "DIR")]
        traversal: PathBuf,
    },
    /// Finite-difference check of every primitive, loss and the network.
    Gradcheck,
}

/// Process entry point: parses `std::env::args`, runs, maps errors to exit codes.
pub fn main() -> ExitCode {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("egonn: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match configure_threads().and_then(|_| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("egonn: {kind}: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

/// Exit code and label for an error.
pub fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (1, "usage"),
        Error::NonFinite(_) => (3, "numerical"),
        _ => (2, "data"),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Effective configuration after flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(k) = cli.keypoints {
        cfg.eval.keypoints = k;
    }
    if let Some(n) = &cli.top_n {
        cfg.eval.top_n = parse_list(n)?;
    }
    if let Some(t) = &cli.thresholds {
        cfg.eval.thresholds = parse_list(t)?;
    }
    if let Command::Localize {
        selection: Some(s), ..
    } = &cli.command
    {
        cfg.eval.selection = *s;
    }
    cfg.validate()?;
    Ok(cfg.effective())
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Echoes the configuration next to a file output.
fn echo_beside(cfg: &RunConfig, file: &Path) -> Result<()> {
    let dir = file.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.echo(dir)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenerateData => generate_data(&cfg, required_out(cli)?),
        Command::Train { data, resume } => train(&cfg, data, resume.as_deref(), required_out(cli)?),
        Command::Extract { checkpoint, traversal } => {
            extract(&cfg, checkpoint, traversal, cli.keypoints, required_out(cli)?)
        }
        Command::BuildDb { checkpoint, traversal } => build_db(&cfg, checkpoint, traversal, required_out(cli)?),
        Command::Localize {
            checkpoint,
            db,
            traversal,
            ..
        } => localize_cmd(&cfg, checkpoint, db, traversal, required_out(cli)?),
        Command::EvaluateRetrieval { checkpoint, db, traversal } => {
            evaluate_retrieval(&cfg, checkpoint, db, traversal, required_out(cli)?)
        }
        Command::EvaluatePose {
            localization,
            db,
            traversal,
        } => evaluate_pose_cmd(&cfg, localization, db, traversal, required_out(cli)?),
        Command::Gradcheck => gradcheck(&cfg, cli.out.as_deref()),
    }
}

/// Subdirectory names written by `generate-data`.
pub fn train_dir_name(k: usize) -> String {
    format!("train_{k:02}")
}
pub const DATABASE_DIR: &str = "database";
pub const QUERIES_DIR: &str = "queries";

pub fn generate_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let world = generate_world(&d.world)?;
    let mut plan: Vec<(String, &crate::data::TrajectorySpec)> =
        d.train.iter().enumerate().map(|(k, t)| (train_dir_name(k), t)).collect();
    plan.push((DATABASE_DIR.into(), &d.database));
    plan.push((QUERIES_DIR.into(), &d.queries));
    for (name, traj) in plan {
        let scans = generate_traversal(&world, traj, &d.scan)?;
        Traversal::write(&out.join(&name), &scans, d.layout)?;
        println!("{name}: {} scans", scans.len());
    }
    cfg.echo(out)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<EgoNN> {
    EgoNN::load(cfg.net.clone(), checkpoint)
}

/// Training traversals of a generated data directory, in name order.
pub fn training_traversals(data: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .map_err(|e| Error::io(format!("read {}", data.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("train_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no train_* traversals under {}", data.display())));
    }
    Ok(dirs)
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TIMING_FILE: &str = "timing.log";

pub fn train(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<()> {
    create_dir(out)?;
    cfg.echo(out)?;
    let mut scans = Vec::new();
    for dir in training_traversals(data)? {
        scans.extend(Traversal::load(&dir)?.load_scans(cfg.data.layout)?);
    }
    let set = TrainSet::new(scans, &cfg.loss)?;
    let model = EgoNN::new(cfg.net.clone(), cfg.train.seed)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(path, model, cfg.train.clone(), cfg.loss)?,
        None => Trainer::new(model, cfg.train.clone(), cfg.loss)?,
    };
    let total = cfg.train.total_steps();
    let every = cfg.train.checkpoint_every;
    let start = Instant::now();
    let mut timing = String::new();
    trainer.run_until(&set, total, |t, entry| {
        if every > 0 && t.step % every == 0 && t.step < total {
            t.save_checkpoint(&out.join(format!("checkpoint_{:06}.ckpt", t.step)))?;
        }
        if t.step % 50 == 0 || t.step == total {
            println!("step {}/{total}: {}", t.step, entry.csv_row());
            timing.push_str(&format!("step {} elapsed_s {:.3}\n", t.step, start.elapsed().as_secs_f64()));
        }
        Ok(())
    })?;
    trainer.save_checkpoint(&out.join(MODEL_FILE))?;
    write_file(&out.join(TRAIN_LOG_FILE), &trainer.log.to_csv())?;
    timing.push_str(&format!("total elapsed_s {:.3}\n", start.elapsed().as_secs_f64()));
    write_file(&out.join(TIMING_FILE), &timing)
}

pub fn extract(cfg: &RunConfig, checkpoint: &Path, traversal: &Path, keep: Option<usize>, out: &Path) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let trav = Traversal::load(traversal)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let clouds = trav.load_clouds(cfg.data.layout)?;
    let features = model.extract(&clouds, Branches::Both)?;
    for (i, mut f) in features.into_iter().enumerate() {
        if let (Some(k), Some(ks)) = (keep, f.keypoints.as_ref()) {
            f.keypoints = Some(select_keypoints(ks, k));
        }
        f.save(&out.join(format!("{i:06}.feat")))?;
    }
    println!("{} feature files", trav.len());
    Ok(())
}

/// Global descriptors of every cloud in a traversal, in manifest order.
fn global_descriptors(model: &EgoNN, trav: &Traversal, cfg: &RunConfig) -> Result<Vec<Vec<f64>>> {
    let clouds = trav.load_clouds(cfg.data.layout)?;
    Ok(model
        .extract(&clouds, Branches::Global)?
        .into_iter()
        .map(|e| e.global.expect("global branch requested").vec)
        .collect())
}

pub fn build_db(cfg: &RunConfig, checkpoint: &Path, traversal: &Path, out: &Path) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let trav = Traversal::load(traversal)?;
    let descs = global_descriptors(&model, &trav, cfg)?;
    let mut db = DescriptorDB::new();
    for (i, (entry, d)) in trav.entries.iter().zip(&descs).enumerate() {
        // Absolute, so localize can find the clouds from any working directory.
        let path = std::path::absolute(&entry.cloud_path).unwrap_or_else(|_| entry.cloud_path.clone());
        db.add(i as u64, d, &entry.pose, &path.to_string_lossy())?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    db.save(out)?;
    echo_beside(cfg, out)
}

pub fn localize_cmd(cfg: &RunConfig, checkpoint: &Path, db_path: &Path, traversal: &Path, out: &Path) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let db = DescriptorDB::load(db_path)?;
    let trav = Traversal::load(traversal)?;
    let clouds = trav.load_clouds(cfg.data.layout)?;
    let queries: Vec<(Vec<f64>, _)> = model
        .extract(&clouds, Branches::Both)?
        .into_iter()
        .map(|e| (e.global.expect("requested").vec, e.keypoints.expect("requested")))
        .collect();
    let opts = LocalizeOptions {
        keypoints: cfg.eval.keypoints,
        selection: cfg.eval.selection,
        mutual: cfg.eval.mutual,
        ransac: cfg.eval.ransac.clone(),
    };
    let locs = localize(
        &db,
        &queries,
        |id| {
            let entry = db.get(id).expect("ranked id exists");
            let cloud = load_cloud(Path::new(&entry.path), cfg.data.layout)?;
            Ok(model.extract_one(&cloud, Branches::Local)?.keypoints.expect("requested"))
        },
        &opts,
    )?;
    write_file(out, &localizations_csv(&locs))?;
    echo_beside(cfg, out)
}

pub fn evaluate_retrieval(cfg: &RunConfig, checkpoint: &Path, db_path: &Path, traversal: &Path, out: &Path) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let db = DescriptorDB::load(db_path)?;
    let trav = Traversal::load(traversal)?;
    let descs = global_descriptors(&model, &trav, cfg)?;
    let queries: Vec<_> = descs.into_iter().zip(trav.poses()).collect();
    let report = evaluate_recall(&db, &queries, &cfg.eval.top_n, &cfg.eval.thresholds)?;
    let csv = report.to_csv();
    print!("{csv}");
    write_file(out, &csv)?;
    echo_beside(cfg, out)
}

pub fn evaluate_pose_cmd(cfg: &RunConfig, localization: &Path, db_path: &Path, traversal: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(localization).map_err(|e| Error::io(format!("read {}", localization.display()), e))?;
    let locs = parse_localizations(&text, localization)?;
    let db = DescriptorDB::load(db_path)?;
    let trav = Traversal::load(traversal)?;
    let report = evaluate_pose(&locs, &trav.poses(), &db, cfg.eval.coarse_threshold)?;
    let csv = report.to_csv();
    print!("{csv}");
    write_file(out, &csv)?;
    echo_beside(cfg, out)
}

pub fn gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let results = gradient_suite(cfg.train.seed)?;
    let csv = results_csv(&results);
    print!("{csv}");
    if let Some(path) = out {
        write_file(path, &csv)?;
    }
    match results.iter().find(|r| !r.passed()) {
        Some(r) => Err(Error::NonFinite(format!(
            "gradient check {} failed: relative error {:.3e} exceeds {:e}",
            r.name,
            r.max_rel_err,
            r.kind.tolerance()
        ))),
        None => Ok(()),
    }
}
