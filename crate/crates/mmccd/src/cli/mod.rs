//! Command-line front end: `generate-data`, `train`, `infer`, `evaluate` and
//! `run-all`, all driven by one resolved [`ExperimentConfig`].

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use mmccd_core::slices::Split;

pub use config::{DataConfig, DataSource, ExperimentConfig, Overrides};

use crate::data::brats::{ingest, BratsOptions};
use crate::data::store::{dataset_digest, read_dataset, read_digest, read_manifest, write_dataset, MANIFEST};
use crate::data::{phantom_dataset, DataError, Dataset};
use crate::evaluation::{
    evaluate, load_scored, render_table, scores_digest, write_scores, MetricsReport, ThresholdSource,
};
use crate::models::{ModelError, Network};
use crate::pipelines::{infer_method, train_method, Method, PipelineError, TrainHooks, TrainedMethod};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Layout(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "mmccd", version, about = "Unsupervised anomaly segmentation by masked cyclic modality translation")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom or ingest BraTS volumes into <output>/data.
    GenerateData {
        /// Replace an existing dataset whose digest differs.
        #[arg(long)]
        force: bool,
    },
    /// Train one method; checkpoints go to <output>/models/<method>.
    Train {
        #[arg(long)]
        method: Option<String>,
        /// Continue from existing checkpoints instead of refusing to overwrite.
        #[arg(long)]
        resume: bool,
    },
    /// Write anomaly score maps for a split to <output>/scores/<method>.
    Infer {
        #[arg(long)]
        method: Option<String>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Compute the metrics report from score maps.
    Evaluate {
        #[arg(long)]
        method: Option<String>,
        /// Fixed threshold; by default it is selected on validation scores.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Generate data, then train, infer and evaluate every configured method.
    RunAll {
        /// Comma-separated method list (overrides `methods` in the config).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        resume: bool,
    },
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        CliError::Config(format!("unknown method {s:?} (expected one of {})", names.join(", ")))
    })
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let method = match &cli.command {
        Command::Train { method, .. } | Command::Infer { method, .. } | Command::Evaluate { method, .. } => {
            method.as_deref().map(parse_method).transpose()?
        }
        _ => None,
    };
    let mut cfg = config::resolve(&cli.overrides, method)?;
    match cli.command {
        Command::GenerateData { force } => {
            cfg.validate(&[])?;
            cfg.echo("generate-data")?;
            generate_data(&cfg, force).map(|_| ())
        }
        Command::Train { resume, .. } => {
            cfg.validate(&[cfg.method])?;
            cfg.echo("train")?;
            let data = load_data(&cfg)?;
            train(&cfg, cfg.method, &data, resume, &BTreeMap::new()).map(|_| ())
        }
        Command::Infer { split, .. } => {
            cfg.validate(&[cfg.method])?;
            cfg.echo("infer")?;
            let data = load_data(&cfg)?;
            let trained = load_trained(&cfg, cfg.method)?;
            infer(&cfg, &trained, &data, split).map(|_| ())
        }
        Command::Evaluate { threshold, .. } => {
            cfg.validate(&[cfg.method])?;
            cfg.echo("evaluate")?;
            let source = threshold.map_or(ThresholdSource::FromValidation, ThresholdSource::Fixed);
            let report = evaluate_method(&cfg, cfg.method, source)?;
            write_reports(&cfg, &report.method.clone(), std::slice::from_ref(&report))
        }
        Command::RunAll { methods, resume } => {
            if let Some(list) = methods {
                cfg.methods = list.iter().map(|s| parse_method(s)).collect::<Result<_, _>>()?;
            }
            let methods = cfg.methods.clone();
            if methods.is_empty() {
                return Err(CliError::Config("no methods to run".into()));
            }
            cfg.validate(&methods)?;
            cfg.echo("run-all")?;
            run_all(&cfg, &methods, resume).map(|_| ())
        }
    }
}

/// Builds the dataset described by the config, in memory.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    match cfg.data.source {
        DataSource::Phantom => phantom_dataset(&cfg.data.phantom, cfg.data.counts, cfg.experiment.image_size)
            .map_err(|e| CliError::Config(e.to_string())),
        DataSource::BratsDir => {
            let opts = BratsOptions {
                modality_x: cfg.modality_x,
                modality_y: cfg.modality_y.unwrap_or(cfg.modality_x),
                resolution: cfg.experiment.image_size,
                split_seed: cfg.data.split_seed,
            };
            let root = cfg.data.brats_dir.clone().expect("validated");
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.experiment.workers)
                .build()
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(pool.install(|| ingest(&root, &opts))?)
        }
    }
}

/// Writes the dataset unless an identical one is already present; returns
/// its digest.
pub fn generate_data(cfg: &ExperimentConfig, force: bool) -> Result<String, CliError> {
    let data = build_dataset(cfg)?;
    if data.train.is_empty() {
        return Err(CliError::Runtime("dataset has no training slices".into()));
    }
    let digest = dataset_digest(&data);
    let dir = cfg.data_dir();
    match read_digest(&dir) {
        Some(existing) if existing == digest => {
            log::info!("dataset in {} is up to date ({digest})", dir.display());
            return Ok(digest);
        }
        Some(existing) if !force => {
            return Err(CliError::Runtime(format!(
                "{} holds a different dataset ({existing}); pass --force to replace it",
                dir.display()
            )));
        }
        Some(_) => fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?,
        None => {}
    }
    let written = write_dataset(&dir, &data)?;
    log::info!(
        "wrote {} train / {} val / {} test slices to {} ({written})",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        dir.display()
    );
    Ok(written)
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let dir = cfg.data_dir();
    if !dir.join(MANIFEST).is_file() {
        return Err(CliError::Config(format!("no dataset in {}; run generate-data first", dir.display())));
    }
    let data = read_dataset(&dir)?;
    let size = cfg.experiment.image_size;
    if let Some(p) = data.iter().find(|p| p.x.shape() != (size, size)) {
        return Err(CliError::Config(format!(
            "dataset slices are {}x{} but image_size is {size}",
            p.x.height(),
            p.x.width()
        )));
    }
    Ok(data)
}

fn ckpt_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

fn load_if_exists(path: &Path) -> Result<Option<Network>, CliError> {
    if path.is_file() {
        Ok(Some(Network::load(path)?))
    } else {
        Ok(None)
    }
}

/// Keeps only loss-log lines up to `step`, so a resumed run continues the
/// log without duplicates.
fn truncate_log(path: &Path, step: u64) -> Result<(), CliError> {
    if !path.is_file() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        let s = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
        if s.is_none_or(|s| s <= step) {
            kept.push(line);
        }
    }
    fs::write(path, kept.join("\n") + "\n").map_err(|e| io_err(path, e))
}

/// Trains `method`, writing periodic checkpoints to `checkpoints/`, one loss
/// log per network and the final networks to `<network>.ckpt`.
pub fn train(
    cfg: &ExperimentConfig,
    method: Method,
    data: &Dataset,
    resume: bool,
    shared: &BTreeMap<String, Network>,
) -> Result<TrainedMethod, CliError> {
    let dir = cfg.model_dir(method);
    let ck_dir = dir.join("checkpoints");
    let names = TrainedMethod::network_names(method);
    let finals: Vec<PathBuf> = names.iter().map(|n| ckpt_path(&dir, n)).collect();
    let has_state = finals.iter().any(|p| p.exists())
        || fs::read_dir(&ck_dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if has_state && !resume {
        return Err(CliError::Config(format!(
            "{} already holds checkpoints; pass --resume to continue or choose another output directory",
            dir.display()
        )));
    }
    fs::create_dir_all(&ck_dir).map_err(|e| io_err(&ck_dir, e))?;

    let mut reuse = shared.clone();
    let mut partial = BTreeMap::new();
    if resume {
        for (name, path) in names.iter().zip(&finals) {
            if let Some(net) = load_if_exists(path)? {
                // a plain network below the step budget keeps training; swept
                // ones are kept as they are
                let key = net.metadata.get("candidate").cloned().unwrap_or_default();
                if net.step < cfg.experiment.train.max_steps && key == *name {
                    log::info!("{}: continuing {name} from step {}", method.name(), net.step);
                    truncate_log(&dir.join(format!("{key}.loss.csv")), net.step)?;
                    partial.insert(key, net);
                } else {
                    log::info!("{}: using finished network {name}", method.name());
                    reuse.insert(name.to_string(), net);
                }
            }
        }
        if let Ok(entries) = fs::read_dir(&ck_dir) {
            for entry in entries.flatten() {
                let path = entry.path();
                if path.extension().is_some_and(|e| e == "ckpt") {
                    let net = Network::load(&path)?;
                    let key = net.metadata.get("candidate").cloned().unwrap_or_default();
                    log::info!("{}: resuming {key} from step {}", method.name(), net.step);
                    truncate_log(&dir.join(format!("{key}.loss.csv")), net.step)?;
                    partial.insert(key, net);
                }
            }
        }
    }

    let mut logs: BTreeMap<String, fs::File> = BTreeMap::new();
    let mut log_err: Option<CliError> = None;
    let started = Instant::now();
    let every = cfg.experiment.train.max_steps.div_ceil(20).max(1);
    let mut progress = |name: &str, step: u64, loss: f64| {
        if log_err.is_some() {
            return;
        }
        if !logs.contains_key(name) {
            let path = dir.join(format!("{name}.loss.csv"));
            let fresh = !path.exists() || !partial.contains_key(name);
            let file = fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path);
            match file {
                Ok(mut f) => {
                    if fresh {
                        let _ = writeln!(f, "step,loss");
                    }
                    logs.insert(name.to_string(), f);
                }
                Err(e) => {
                    log_err = Some(io_err(&path, e));
                    return;
                }
            }
        }
        let f = logs.get_mut(name).expect("inserted above");
        if let Err(e) = writeln!(f, "{step},{loss:.8e}") {
            log_err = Some(CliError::Runtime(format!("loss log: {e}")));
        }
        if step % every == 0 {
            log::info!("{} {name} step {step} loss {loss:.5} ({:.0}s)", method.name(), started.elapsed().as_secs_f64());
        }
    };
    let mut checkpoint = |net: &mut Network| -> crate::pipelines::Result<()> {
        let key = net.metadata.get("candidate").cloned().unwrap_or_default();
        net.save(&ckpt_path(&ck_dir, &key))?;
        Ok(())
    };
    let empty_val;
    let val = if data.val.is_empty() {
        empty_val = Vec::new();
        &empty_val
    } else {
        &data.val
    };
    let mut trained = train_method(
        method,
        &cfg.experiment,
        &data.train,
        val,
        TrainHooks { reuse: &reuse, resume: &partial, progress: &mut progress, checkpoint: &mut checkpoint },
    )?;
    if let Some(e) = log_err {
        return Err(e);
    }
    for (name, net) in trained.networks.iter_mut() {
        // a run without steps still leaves an (empty) log
        let key = net.metadata.get("candidate").cloned().unwrap_or_else(|| name.clone());
        let log = dir.join(format!("{key}.loss.csv"));
        if !reuse.contains_key(name) && !log.exists() {
            fs::write(&log, "step,loss\n").map_err(|e| io_err(&log, e))?;
        }
        net.save(&ckpt_path(&dir, name))?;
    }
    let _ = fs::remove_dir_all(&ck_dir);
    log::info!("{} trained in {:.0}s", method.name(), started.elapsed().as_secs_f64());
    Ok(trained)
}

fn load_trained(cfg: &ExperimentConfig, method: Method) -> Result<TrainedMethod, CliError> {
    let dir = cfg.model_dir(method);
    let mut nets = BTreeMap::new();
    for name in TrainedMethod::network_names(method) {
        let path = ckpt_path(&dir, name);
        let net = load_if_exists(&path)?.ok_or_else(|| {
            CliError::Config(format!("missing checkpoint {}; run train first", path.display()))
        })?;
        nets.insert(name.to_string(), net);
    }
    Ok(TrainedMethod::from_networks(method, nets)?)
}

/// Runs inference on the requested splits and writes score maps; returns
/// the digest over all written maps.
pub fn infer(cfg: &ExperimentConfig, trained: &TrainedMethod, data: &Dataset, split: SplitArg) -> Result<String, CliError> {
    let slices: Vec<_> = match split {
        SplitArg::Val => data.val.clone(),
        SplitArg::Test => data.test.clone(),
        SplitArg::All => data.val.iter().chain(&data.test).cloned().collect(),
    };
    let started = Instant::now();
    let results = infer_method(trained, &cfg.experiment, &slices)?;
    let dir = cfg.score_dir(trained.method);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let rows = write_scores(&dir, &slices, &results)?;
    let digest = scores_digest(&rows);
    log::info!(
        "{}: {} score maps in {:.0}s, digest {digest}",
        trained.method.name(),
        rows.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(digest)
}

/// Evaluates the stored score maps of `method` against the dataset labels.
pub fn evaluate_method(cfg: &ExperimentConfig, method: Method, source: ThresholdSource) -> Result<MetricsReport, CliError> {
    let data_dir = cfg.data_dir();
    let gt_rows = read_manifest(&data_dir.join(MANIFEST))?;
    let score_dir = cfg.score_dir(method);
    if !score_dir.is_dir() {
        return Err(CliError::Config(format!("no score maps in {}; run infer first", score_dir.display())));
    }
    let scored = load_scored(&score_dir, &data_dir, &gt_rows)?;
    let (val, test): (Vec<_>, Vec<_>) = scored.into_iter().partition(|s| s.row.split == Split::Val);
    if test.is_empty() {
        return Err(CliError::Config(format!("{} has no test score maps", score_dir.display())));
    }
    let echo = serde_json::to_value(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    evaluate(method.label(), &val, &test, source, echo).map_err(|e| CliError::Config(e.to_string()))
}

/// Writes `<name>.txt` (table) and `<name>.json` (machine-readable).
pub fn write_reports(cfg: &ExperimentConfig, name: &str, reports: &[MetricsReport]) -> Result<(), CliError> {
    let dir = cfg.report_dir();
    let stem: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    let table = render_table(reports);
    let json = serde_json::to_vec_pretty(reports).map_err(|e| CliError::Runtime(e.to_string()))?;
    crate::data::pfm::write_atomic(&dir.join(format!("{stem}.txt")), table.as_bytes())?;
    crate::data::pfm::write_atomic(&dir.join(format!("{stem}.json")), &json)?;
    print!("{table}");
    Ok(())
}

/// The whole experiment. Mmccd and Cyclic UNet share the backward
/// translator `g`, trained once.
pub fn run_all(cfg: &ExperimentConfig, methods: &[Method], resume: bool) -> Result<Vec<MetricsReport>, CliError> {
    generate_data(cfg, false)?;
    let data = load_data(cfg)?;
    let mut shared = BTreeMap::new();
    let mut reports = Vec::new();
    for &method in methods {
        let trained = train(cfg, method, &data, resume, &shared)?;
        if method.is_translation() {
            if let Some(g) = trained.networks.get("g") {
                shared.entry("g".to_string()).or_insert_with(|| g.clone());
            }
        }
        infer(cfg, &trained, &data, SplitArg::All)?;
        reports.push(evaluate_method(cfg, method, ThresholdSource::FromValidation)?);
    }
    write_reports(cfg, "report", &reports)?;
    Ok(reports)
}
