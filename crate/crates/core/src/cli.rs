//! The `taskvec` command line.
//!
//! Each command reads and writes a fixed layout under `--out`:
//!
//! ```text
//! suite/                 make-suite
//! checkpoints/           finetune: theta_0, theta_<t>, pool
//! results/ states/       train: one metrics CSV and one state per cell
//! analysis/              analyze: cumulative energy curves
//! report/                report: aggregated table
//! manifest-<command>.json
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::harness::{
    build_pool, gate_filter_baseline, generate_task_suite, load_suite, read_metrics_csv, save_suite, train_regime,
    write_metrics_csv, ExperimentConfig, MetricsRecord, Regime, TaskSuite,
};
use crate::manifest::RunManifest;
use crate::model::Mlp;
use crate::rng;
use crate::task_vectors::{block_row_energy, read_checkpoint, svd_energy, write_checkpoint, ParamSet, TaskVectorPool};

#[derive(Debug, Parser)]
#[command(name = "taskvec", version, about = "Sample-specific composition of task vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Overrides the config seed and restricts training to this seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel (regime, seed) cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and save the synthetic task suite.
    MakeSuite,
    /// Fine-tune the base model on every task and save the task-vector pool.
    Finetune,
    /// Train every configured (regime, seed) cell and write metrics.
    Train,
    /// Cumulative singular-value energy of the task-vector pool.
    Analyze {
        /// Pool checkpoint; defaults to the one under `--out`.
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Aggregate metrics CSVs into a per-regime table.
    Report {
        /// Directory of metrics CSVs; defaults to `<out>/results`.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeSuite => "make-suite",
            Command::Finetune => "finetune",
            Command::Train => "train",
            Command::Analyze { .. } => "analyze",
            Command::Report { .. } => "report",
        }
    }
}

/// Parse `args`, run the command, and return the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("TASKVEC_LOG", "info")).try_init();
    match run(&cli) {
        Ok(manifest) => {
            info!("wrote {}", RunManifest::path_for(&manifest.out_dir, &manifest.command).display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<RunManifest> {
    let (mut cfg, text) = match &cli.config {
        Some(path) => (Config::load(path)?, fs::read_to_string(path).map_err(|e| Error::io(path, e))?),
        None => {
            let cfg = Config::default();
            let text = toml::to_string(&cfg).expect("default config serializes");
            (cfg, text)
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.experiment.seeds = vec![seed];
    }
    cfg.validate()?;
    if cli.jobs == 0 {
        return Err(Error::config("jobs", "must be positive"));
    }
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::new(cli.command.name(), cli.config.as_deref(), &text, out);
    let files = match &cli.command {
        Command::MakeSuite => make_suite(&cfg, out)?,
        Command::Finetune => finetune(&cfg, out)?,
        Command::Train => train(&cfg, out, cli.jobs)?,
        Command::Analyze { pool } => analyze(&pool.clone().unwrap_or_else(|| pool_path(out)), out)?,
        Command::Report { results } => report(&results.clone().unwrap_or_else(|| out.join("results")), out)?,
    };
    for f in &files {
        manifest.add(f)?;
    }
    manifest.write()?;
    Ok(manifest)
}

pub fn suite_dir(out: &Path) -> PathBuf {
    out.join("suite")
}

pub fn pool_path(out: &Path) -> PathBuf {
    out.join("checkpoints").join("pool.ckpt")
}

pub fn theta_0_path(out: &Path) -> PathBuf {
    out.join("checkpoints").join("theta_0.ckpt")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn make_suite(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    let suite = generate_task_suite(&cfg.suite, cfg.seed)?;
    let files = save_suite(&suite, &suite_dir(out))?;
    info!("saved {} tasks to {}", suite.n_tasks(), suite_dir(out).display());
    Ok(files)
}

fn load_checked_suite(cfg: &Config, out: &Path) -> Result<TaskSuite> {
    let suite = load_suite(&suite_dir(out))?;
    if suite.spec != cfg.suite || suite.seed != cfg.seed {
        log::warn!("suite on disk was generated from a different config");
    }
    Ok(suite)
}

pub fn finetune(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    let suite = load_checked_suite(cfg, out)?;
    let mlp = Mlp::new(suite.spec.dim, cfg.base.hidden, suite.spec.classes)?;
    let theta_0 = mlp.init(&mut rng::stream(cfg.seed, "base"));
    let (thetas, pool) = build_pool(&theta_0, &suite, cfg.base.finetune_steps, cfg.base.finetune_lr, &cfg.base.partition)?;
    let dir = out.join("checkpoints");
    create_dir(&dir)?;
    let meta = json!({"seed": cfg.seed, "hidden": cfg.base.hidden});
    let mut files = vec![theta_0_path(out)];
    write_checkpoint(&files[0], "base", &theta_0, meta.clone())?;
    for (t, theta) in thetas.iter().enumerate() {
        let p = dir.join(format!("theta_{t}.ckpt"));
        write_checkpoint(&p, "finetuned", theta, json!({"task": t, "steps": cfg.base.finetune_steps}))?;
        files.push(p);
    }
    pool.save(&pool_path(out))?;
    files.push(pool_path(out));
    info!("fine-tuned {} tasks, {} blocks each", pool.n_tasks(), pool.n_blocks());
    Ok(files)
}

fn cell_name(cell: &ExperimentConfig) -> String {
    let gated = if cell.gated() { "-gated" } else { "" };
    format!("{}{gated}-seed{}", cell.regime, cell.seed)
}

pub fn train(cfg: &Config, out: &Path, jobs: usize) -> Result<Vec<PathBuf>> {
    let suite = load_checked_suite(cfg, out)?;
    let theta_0 = read_checkpoint(&theta_0_path(out))?.params;
    let pool = TaskVectorPool::load(&pool_path(out))?;
    let (results, states) = (out.join("results"), out.join("states"));
    create_dir(&results)?;
    create_dir(&states)?;
    let cells = cfg.cells()?;
    let run_cell = |cell: &ExperimentConfig| -> Result<Vec<PathBuf>> {
        let name = cell_name(cell);
        info!("training {name}");
        let (state, record) = train_regime(cell, &suite, &pool, &theta_0)?;
        info!("{name}: average accuracy {:.4}", record.avg_accuracy);
        let state_path = states.join(format!("{name}.ckpt"));
        state.save(&state_path)?;
        let csv = results.join(format!("metrics-{name}.csv"));
        write_metrics_csv(&csv, std::slice::from_ref(&record))?;
        let mut files = vec![csv, state_path];
        if cell.regime == Regime::TaskLevelDet && cfg.experiment.gate_filter {
            let filtered = gate_filter_baseline(&state, &cell.train.gate, &suite)?;
            let csv = results.join(format!("metrics-task_level_det-filtered-seed{}.csv", cell.seed));
            write_metrics_csv(&csv, &[filtered])?;
            files.push(csv);
        }
        Ok(files)
    };
    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start {jobs} workers: {e}")))?;
    let files: Vec<Vec<PathBuf>> = pool_threads.install(|| cells.par_iter().map(run_cell).collect::<Result<_>>())?;
    Ok(files.into_iter().flatten().collect())
}

fn write_energy(path: &Path, energy: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed { path: path.into(), message: e.to_string() })?;
    let io = |e: csv::Error| Error::Malformed { path: path.into(), message: e.to_string() };
    w.write_record(["component", "cumulative_energy"]).map_err(io)?;
    for (k, e) in energy.iter().enumerate() {
        w.write_record([(k + 1).to_string(), format!("{e:.12}")]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn analyze(pool_file: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let pool = TaskVectorPool::load(pool_file)?;
    let dir = out.join("analysis");
    create_dir(&dir)?;
    let mut files = vec![dir.join("energy.csv")];
    write_energy(&files[0], &svd_energy(&pool)?)?;
    if pool.layout_template().get("w1").is_some() {
        let p = dir.join("energy-w1-rows.csv");
        write_energy(&p, &block_row_energy(&pool, "w1")?)?;
        files.push(p);
    }
    Ok(files)
}

#[derive(Default)]
struct Group {
    records: Vec<MetricsRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn report(results: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(results)
        .map_err(|e| Error::io(results, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Missing(results.join("*.csv")));
    }
    let mut groups: BTreeMap<(usize, String, String, bool), Group> = BTreeMap::new();
    for p in &paths {
        for r in read_metrics_csv(p)? {
            let order = r.regime.parse::<Regime>().map(|g| g as usize).unwrap_or(usize::MAX);
            groups.entry((order, r.regime.clone(), r.prior.clone(), r.gated)).or_default().records.push(r);
        }
    }
    let n_tasks = groups.values().flat_map(|g| g.records.iter().map(|r| r.task_accuracies.len())).max().unwrap_or(0);
    let mut header: Vec<String> =
        ["regime", "prior", "gated", "seeds", "avg_accuracy", "avg_accuracy_sd", "gated_ratio"].map(String::from).to_vec();
    header.extend((1..=n_tasks).map(|t| format!("task{t}")));
    let mut rows = Vec::new();
    for ((_, regime, prior, gated), g) in &groups {
        let n = g.records.len() as f64;
        let avg = mean(g.records.iter().map(|r| r.avg_accuracy));
        let sd = (g.records.iter().map(|r| (r.avg_accuracy - avg).powi(2)).sum::<f64>() / n).sqrt();
        let mut row = vec![
            regime.clone(),
            prior.clone(),
            gated.to_string(),
            g.records.len().to_string(),
            format!("{avg:.4}"),
            format!("{sd:.4}"),
            format!("{:.4}", mean(g.records.iter().map(|r| r.gated_ratio))),
        ];
        for t in 0..n_tasks {
            let accs: Vec<f64> = g.records.iter().filter_map(|r| r.task_accuracies.get(t).copied()).collect();
            row.push(if accs.is_empty() { String::new() } else { format!("{:.4}", mean(accs.into_iter())) });
        }
        rows.push(row);
    }

    let dir = out.join("report");
    create_dir(&dir)?;
    let csv_path = dir.join("table.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Malformed { path: csv_path.clone(), message: e.to_string() })?;
    for r in std::iter::once(&header).chain(&rows) {
        w.write_record(r).map_err(|e| Error::Malformed { path: csv_path.clone(), message: e.to_string() })?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let widths: Vec<usize> =
        (0..header.len()).map(|c| std::iter::once(&header).chain(&rows).map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut text = String::new();
    for r in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(text, "{}", cells.join("  ").trim_end());
    }
    let txt_path = dir.join("table.txt");
    fs::write(&txt_path, &text).map_err(|e| Error::io(&txt_path, e))?;
    print!("{text}");
    Ok(vec![csv_path, txt_path])
}

/// Parameters stored in a plain checkpoint.
pub fn load_params(path: &Path) -> Result<ParamSet> {
    Ok(read_checkpoint(path)?.params)
}
