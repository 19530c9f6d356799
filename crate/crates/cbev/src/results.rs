//! Per-query results, summary metrics and training logs.

use std::fs;
use std::io::Write;
use std::path::Path;

use cbev_core::pipeline::Evaluation;
use cbev_core::train::LossReport;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Reference the pose is expressed in (the top-ranked one).
    pub reference_id: u32,
    pub x: f64,
    pub y: f64,
    pub theta_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: u32,
    pub ranked_ids: Vec<u32>,
    pub combined_scores: Vec<f64>,
    pub prior_logits: Vec<f64>,
    pub bev_scores: Vec<f64>,
    pub pose: PoseRecord,
}

pub fn records(ev: &Evaluation) -> Vec<ResultRecord> {
    ev.results
        .iter()
        .map(|r| {
            let e = &r.reranked.entries;
            ResultRecord {
                query_id: r.query_id,
                ranked_ids: e.iter().map(|c| c.reference_id).collect(),
                combined_scores: e.iter().map(|c| c.active_score()).collect(),
                prior_logits: e.iter().map(|c| c.prior_logit).collect(),
                bev_scores: e.iter().map(|c| c.bev_score.unwrap_or(f64::NAN)).collect(),
                pose: PoseRecord {
                    reference_id: e[0].reference_id,
                    x: r.top_pose.x,
                    y: r.top_pose.y,
                    theta_deg: r.top_pose.theta.to_degrees(),
                },
            }
        })
        .collect()
}

/// Summary metrics. The first seven keys are the stable ones; recall of
/// the stage-one ranking and counts follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_t_err_m: f64,
    pub median_t_err_m: f64,
    pub mean_r_err_deg: f64,
    pub median_r_err_deg: f64,
    pub stage1_r_at_1: f64,
    pub stage1_r_at_5: f64,
    pub stage1_r_at_10: f64,
    pub k: usize,
    pub queries: usize,
}

impl Metrics {
    pub fn from_evaluation(ev: &Evaluation) -> Self {
        Self {
            r_at_1: ev.stage2_recall[0],
            r_at_5: ev.stage2_recall[1],
            r_at_10: ev.stage2_recall[2],
            mean_t_err_m: ev.pose.mean_t_err_m,
            median_t_err_m: ev.pose.median_t_err_m,
            mean_r_err_deg: ev.pose.mean_r_err_deg,
            median_r_err_deg: ev.pose.median_r_err_deg,
            stage1_r_at_1: ev.stage1_recall[0],
            stage1_r_at_5: ev.stage1_recall[1],
            stage1_r_at_10: ev.stage1_recall[2],
            k: ev.k,
            queries: ev.results.len(),
        }
    }
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const METRICS_FILE: &str = "metrics.toml";

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Writes `results.jsonl` and `metrics.toml` into `dir`.
pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> CliResult<Metrics> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_jsonl(&dir.join(RESULTS_FILE), &records(ev))?;
    let metrics = Metrics::from_evaluation(ev);
    let path = dir.join(METRICS_FILE);
    let text = toml::to_string(&metrics).expect("metrics serialize");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(metrics)
}

pub fn read_metrics(path: &Path) -> CliResult<Metrics> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub in_batch_accuracy: f64,
    pub street_to_aerial_loss: f64,
    pub aerial_to_street_loss: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub fn new(stage: &str, r: &LossReport) -> Self {
        Self {
            stage: stage.into(),
            epoch: r.epoch,
            loss: r.loss,
            in_batch_accuracy: r.accuracy_in_batch,
            street_to_aerial_loss: r.s2a_loss,
            aerial_to_street_loss: r.a2s_loss,
            lr: r.lr,
        }
    }
}

/// Appends one JSON line per epoch, flushing as it goes.
pub struct EpochLog {
    file: fs::File,
    path: std::path::PathBuf,
}

impl EpochLog {
    pub fn create(path: &Path) -> CliResult<Self> {
        let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, record: &EpochRecord) -> CliResult<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| CliError::io(&self.path, e))
    }
}
