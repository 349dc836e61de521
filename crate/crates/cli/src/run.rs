//! `flocora run`: one experiment per seed, metrics streamed to CSV.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use flocora::federation::{Federation, RoundReport};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig, RESOLVED_CONFIG_FILE};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub parallel_clients: Option<usize>,
    pub data_root: Option<PathBuf>,
    pub quiet: bool,
}

/// One row of `metrics.csv`. Byte columns are per participating client;
/// `loss` is the aggregated model's loss on the training set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub cumulative_tcc: u64,
    pub test_loss: f64,
    pub clients: usize,
}

impl From<&RoundReport> for MetricsRow {
    fn from(r: &RoundReport) -> Self {
        MetricsRow {
            round: r.round,
            seed: r.seed,
            accuracy: r.test_accuracy,
            loss: r.train_loss,
            uplink_bytes: r.uplink_bytes_per_client,
            downlink_bytes: r.downlink_bytes_per_client,
            cumulative_tcc: r.cumulative_tcc,
            test_loss: r.test_loss,
            clients: r.sampled.len(),
        }
    }
}

/// Mean and sample standard deviation (`n − 1`); `std` is absent for a
/// single value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub per_seed: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Stat {
        let n = values.len() as f64;
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / n);
        let std = mean.filter(|_| values.len() > 1).map(|m| {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Stat { mean, std, per_seed: values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub rounds: usize,
    /// Accuracy after the last round.
    pub final_accuracy: Stat,
    /// Highest per-round accuracy.
    pub best_accuracy: Stat,
    /// Per-client total communication cost in bytes.
    pub total_tcc_bytes: Stat,
    pub total_tcc_mb: Stat,
}

impl Summary {
    pub fn from_runs(seeds: &[u64], rounds: usize, runs: &[Vec<RoundReport>]) -> Summary {
        let last = |f: fn(&RoundReport) -> f64| -> Vec<f64> { runs.iter().filter_map(|r| r.last().map(f)).collect() };
        let best = runs
            .iter()
            .filter(|r| !r.is_empty())
            .map(|r| r.iter().map(|x| x.test_accuracy).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let tcc: Vec<f64> = runs.iter().map(|r| r.last().map_or(0.0, |x| x.cumulative_tcc as f64)).collect();
        Summary {
            seeds: seeds.to_vec(),
            rounds,
            final_accuracy: Stat::of(last(|x| x.test_accuracy)),
            best_accuracy: Stat::of(best),
            total_tcc_mb: Stat::of(tcc.iter().map(|b| b / 1e6).collect()),
            total_tcc_bytes: Stat::of(tcc),
        }
    }
}

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub summary: Summary,
    pub reports: Vec<Vec<RoundReport>>,
}

pub fn run(opts: &RunOptions) -> anyhow::Result<RunOutcome> {
    let mut cfg = ExperimentConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(p) = opts.parallel_clients {
        cfg.federation.parallel_clients = p;
    }
    let out_dir = opts
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| ConfigError("no output directory: pass --out or set out_dir".into()))?;
    cfg.out_dir = Some(out_dir.clone());
    cfg.validate()?;

    let (train, test) = cfg.load_dataset(opts.data_root.as_deref())?;
    let spec = cfg.model_spec(&train)?;
    let (train, test) = (Arc::new(train), Arc::new(test));

    fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    fs::write(out_dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)?;
    let mut metrics = csv::Writer::from_path(out_dir.join(METRICS_FILE))?;

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let mut fed_cfg = cfg.federation.clone();
        fed_cfg.seed = seed;
        let rounds = fed_cfg.rounds;
        let mut fed = Federation::new(fed_cfg, spec.clone(), train.clone(), test.clone())?;
        let mut reports = Vec::with_capacity(rounds);
        for round in 0..rounds {
            let report = fed.run_round(round)?;
            metrics.serialize(MetricsRow::from(&report))?;
            metrics.flush()?;
            if !opts.quiet {
                eprintln!(
                    "seed {seed} round {}/{rounds}: accuracy {:.4} loss {:.4} uplink {} B ({} ms)",
                    round + 1,
                    report.test_accuracy,
                    report.train_loss,
                    report.uplink_bytes_per_client,
                    report.wall_time_ms
                );
            }
            reports.push(report);
        }
        if !opts.quiet {
            eprintln!("seed {seed} finished in {:.1} s", started.elapsed().as_secs_f64());
        }
        runs.push(reports);
    }

    let summary = Summary::from_runs(&cfg.seeds, cfg.federation.rounds, &runs);
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(RunOutcome { out_dir, summary, reports: runs })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}
