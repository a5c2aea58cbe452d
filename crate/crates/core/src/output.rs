//! Text renderings of run artifacts and the files a run directory holds.
//!
//! Renderers are pure so reruns can be compared byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::Result;
use crate::harness::{self, CurvePoint, Metrics, StepRecord, TrainReport, VariantResult, Variant};
use crate::qfunc::QNetwork;

pub const RUN_LOG: &str = "run.log";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const CONFIG_ECHO: &str = "config.echo";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One JSON object per line.
pub fn run_log(records: &[StepRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("completion_rate,pick_success,action_efficiency,runs,completed\n");
    writeln!(
        s,
        "{},{},{},{},{}",
        m.completion_rate,
        opt(m.pick_success),
        opt(m.action_efficiency),
        m.runs.len(),
        m.completed_runs()
    )
    .unwrap();
    s
}

pub fn curves_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step_end,success_rate,efficiency,goals\n");
    for p in curve {
        writeln!(s, "{},{},{},{}", p.step_end, p.success_rate, opt(p.efficiency), p.goals).unwrap();
    }
    s
}

pub fn ablation_metrics_csv(results: &[VariantResult]) -> String {
    let mut s = String::from("variant,seed,completion_rate,pick_success,action_efficiency,runs,completed\n");
    for r in results {
        let m = &r.metrics;
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant.name(),
            r.seed,
            m.completion_rate,
            opt(m.pick_success),
            opt(m.action_efficiency),
            m.runs.len(),
            m.completed_runs()
        )
        .unwrap();
    }
    s
}

pub fn ablation_curves_csv(results: &[VariantResult]) -> String {
    let mut s = String::from("variant,seed,step_end,success_rate,efficiency,goals\n");
    for r in results {
        for p in &r.curve {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.variant.name(),
                r.seed,
                p.step_end,
                p.success_rate,
                opt(p.efficiency),
                p.goals
            )
            .unwrap();
        }
    }
    s
}

pub fn ablation_median_csv(results: &[VariantResult]) -> String {
    let mut s = String::from("variant,median_completion_rate,median_action_efficiency\n");
    for v in Variant::ALL {
        let (c, e) = harness::median_metrics(results, v);
        writeln!(s, "{},{c},{e}", v.name()).unwrap();
    }
    s
}

/// Trains and writes run.log, curves.csv, checkpoint.bin(+.meta) and config.echo.
/// Periodic checkpoints overwrite checkpoint.bin so a divergence leaves the last good one.
pub fn train_to_dir(cfg: &RunConfig, dir: &Path) -> Result<TrainReport> {
    std::fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    std::fs::write(dir.join(CONFIG_ECHO), cfg.to_toml())?;
    let ckpt = dir.join(CHECKPOINT);
    let report = harness::train_with(cfg, |_, net| checkpoint::save(&ckpt, net, hash))?;
    checkpoint::save(&ckpt, &report.network, hash)?;
    std::fs::write(dir.join(RUN_LOG), run_log(&report.records))?;
    std::fs::write(dir.join(CURVES_CSV), curves_csv(&report.curve))?;
    Ok(report)
}

/// Evaluates `net` and writes metrics.csv.
pub fn eval_to_dir(net: &QNetwork, cfg: &RunConfig, dir: &Path) -> Result<Metrics> {
    std::fs::create_dir_all(dir)?;
    let metrics = harness::evaluate(net, cfg)?;
    std::fs::write(dir.join(METRICS_CSV), metrics_csv(&metrics))?;
    Ok(metrics)
}
