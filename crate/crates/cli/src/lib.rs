//! Runs declarative experiment configs and writes their artifacts.
//!
//! Every run produces, under `<out>/<name>/`:
//! - `rounds.csv` with the fixed schema
//!   `round,accuracy,loss,tpr,fpr,agg_norm,sel_counts`
//! - `summary.json` (final/best accuracy, mean filter rates)
//! - `config.json`, the fully resolved config as provenance
//!
//! Reruns with the same seed are byte-identical, also under `--jobs > 1`:
//! runs only share immutable inputs and write into disjoint directories.

pub mod config_file;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use lasa_core::config::ExperimentConfig;
use lasa_core::engine::{run_experiment, ExperimentResult};
use lasa_core::metrics::{self, estimate_kappa, KappaReport, KappaScenario};
use lasa_core::{Error, Result};

pub use config_file::parse_config;

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub aggregator: String,
    pub attack: String,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub final_loss: f64,
    pub mean_tpr: f64,
    pub mean_fpr: f64,
}

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub csv_path: PathBuf,
}

pub fn load_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("experiment");
    let mut cfg = parse_config(&text, stem)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out_dir = out.to_path_buf();
    }
    Ok(cfg)
}

/// Executes one config and writes its artifacts.
pub fn run_to_dir(cfg: &ExperimentConfig, dump_updates: bool) -> Result<RunArtifacts> {
    let result = run_experiment(cfg)?;
    write_artifacts(cfg, &result, dump_updates)
}

fn attack_label(cfg: &ExperimentConfig) -> String {
    cfg.attack
        .as_ref()
        .map(|a| a.kind.key().to_string())
        .unwrap_or_else(|| "none".to_string())
}

fn write_artifacts(
    cfg: &ExperimentConfig,
    result: &ExperimentResult,
    dump_updates: bool,
) -> Result<RunArtifacts> {
    let dir = cfg.out_dir.join(&cfg.name);
    fs::create_dir_all(&dir)?;

    let csv_path = dir.join("rounds.csv");
    let mut csv = String::from("round,accuracy,loss,tpr,fpr,agg_norm,sel_counts\n");
    let mut tpr_sum = 0.0;
    let mut fpr_sum = 0.0;
    let mut best_accuracy: f64 = 0.0;
    let mut last_stats = None;
    for record in &result.records {
        let stats = metrics::filter_stats(&record.outcome, &result.honesty)?;
        tpr_sum += stats.tpr;
        fpr_sum += stats.fpr;
        best_accuracy = best_accuracy.max(record.test_accuracy);
        let sel_counts = record
            .outcome
            .selected_counts()
            .iter()
            .enumerate()
            .map(|(l, c)| format!("l{l}:{c}"))
            .collect::<Vec<_>>()
            .join(";");
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.8e},{}\n",
            record.round,
            record.test_accuracy,
            record.train_loss,
            stats.tpr,
            stats.fpr,
            record.outcome.aggregate.norm(),
            sel_counts
        ));
        last_stats = Some(stats);
    }
    fs::write(&csv_path, csv)?;
    if let Some(stats) = &last_stats {
        fs::write(
            dir.join("filter_stats.json"),
            serde_json::to_string_pretty(stats).expect("stats serialize") + "\n",
        )?;
    }

    if dump_updates {
        let updates_dir = dir.join("updates");
        fs::create_dir_all(&updates_dir)?;
        for record in &result.records {
            let path = updates_dir.join(format!("round_{:04}.bin", record.round));
            fs::write(path, record.outcome.aggregate.to_bytes())?;
        }
    }

    let n_rounds = result.records.len();
    let summary = RunSummary {
        name: cfg.name.clone(),
        aggregator: cfg.aggregator.key().to_string(),
        attack: attack_label(cfg),
        rounds: n_rounds,
        final_accuracy: result.records.last().map(|r| r.test_accuracy).unwrap_or(0.0),
        best_accuracy,
        final_loss: result.records.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        mean_tpr: if n_rounds == 0 { 0.0 } else { tpr_sum / n_rounds as f64 },
        mean_fpr: if n_rounds == 0 { 0.0 } else { fpr_sum / n_rounds as f64 },
    };
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes") + "\n",
    )?;

    Ok(RunArtifacts {
        dir,
        summary,
        csv_path,
    })
}

/// Runs each config (in parallel when `jobs > 1`) and writes a comparison
/// table with one row per (aggregator, attack).
pub fn compare(configs: &[ExperimentConfig], jobs: usize, out: &Path) -> Result<Vec<RunSummary>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let summaries: Vec<RunSummary> = pool.install(|| {
        configs
            .par_iter()
            .map(|cfg| run_to_dir(cfg, false).map(|a| a.summary))
            .collect::<Result<_>>()
    })?;

    fs::create_dir_all(out)?;
    let mut table = String::from("aggregator,attack,final_accuracy,best_accuracy,mean_tpr,mean_fpr\n");
    for s in &summaries {
        table.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            s.aggregator, s.attack, s.final_accuracy, s.best_accuracy, s.mean_tpr, s.mean_fpr
        ));
    }
    fs::write(out.join("comparison.csv"), &table)?;
    Ok(summaries)
}

pub fn render_comparison(summaries: &[RunSummary], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "{:<12} {:<16} {:>10} {:>10} {:>8} {:>8}",
        "aggregator", "attack", "final_acc", "best_acc", "tpr", "fpr"
    )?;
    for s in summaries {
        writeln!(
            w,
            "{:<12} {:<16} {:>10.4} {:>10.4} {:>8.4} {:>8.4}",
            s.aggregator, s.attack, s.final_accuracy, s.best_accuracy, s.mean_tpr, s.mean_fpr
        )?;
    }
    Ok(())
}

/// Robustness-coefficient estimation for a config: the aggregator and
/// attack run on the standard small scenario with `n = clients` and
/// `f = floor(attack_ratio * clients)` malicious slots.
pub fn kappa_run(cfg: &ExperimentConfig) -> Result<KappaReport> {
    let f = (cfg.attack_ratio * cfg.clients as f64 * (1.0 + 1e-12)).floor() as usize;
    let scenario = KappaScenario::new(cfg.clients, f, cfg.seed)?;
    let report = estimate_kappa(
        &cfg.aggregator,
        &scenario,
        cfg.attack.as_ref(),
        cfg.kappa_trials,
        cfg.seed,
    )?;
    let dir = cfg.out_dir.join(&cfg.name);
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join("kappa.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    Ok(report)
}
