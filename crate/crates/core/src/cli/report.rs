//! Summary table over every evaluated model, in text and JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stages::{CurvePoint, MaskedEval, TrainSummary};
use crate::distill::compression_ratio;
use crate::error::{Error, Result};
use crate::io;
use crate::probes::{EvalRecord, ProbeTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub iteration: usize,
    pub task: String,
    pub metric: String,
    pub split: String,
    pub value: f64,
    pub params: usize,
    /// Percent, relative to the iteration-1 model.
    pub delta_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurves {
    pub iteration: usize,
    pub pca: Vec<f64>,
    pub no_pca: Vec<f64>,
    /// Mean loss over the run; lower means faster convergence.
    pub pca_mean_loss: f64,
    pub no_pca_mean_loss: f64,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub training: Vec<TrainSummary>,
    pub ablations: Vec<AblationCurves>,
}

fn iterations_under(dir: &Path) -> Vec<usize> {
    let mut v: Vec<usize> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
        .collect();
    v.sort_unstable();
    v
}

fn summary(out: &Path, i: usize) -> Result<Option<TrainSummary>> {
    let stage = if i == 1 { "pretrain" } else { "distill" };
    let p = out.join(stage).join(i.to_string()).join("summary.json");
    if p.is_file() {
        io::read_json(&p).map(Some)
    } else {
        Ok(None)
    }
}

fn task_name(t: ProbeTask) -> &'static str {
    match t {
        ProbeTask::Classification => "classification",
        ProbeTask::Ctc => "ctc",
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Collects every evaluation under `out` into a report.
pub fn build_report(out: &Path) -> Result<Report> {
    let mut training = Vec::new();
    for i in 1.. {
        match summary(out, i)? {
            Some(s) => training.push(s),
            None => break,
        }
    }
    let reference = training.first().map(|s| s.param_count);
    let mut rows = Vec::new();
    for i in iterations_under(&out.join("eval")) {
        let dir = out.join("eval").join(i.to_string());
        let Some(s) = summary(out, i)? else { continue };
        let delta_s = match reference {
            Some(r) => compression_ratio(r, s.param_count)?,
            None => 0.0,
        };
        let model = format!("iter{i} ({})", s.preset);
        let row = |task: &str, metric: &str, split: &str, value: f64| ReportRow {
            model: model.clone(),
            iteration: i,
            task: task.into(),
            metric: metric.into(),
            split: split.into(),
            value,
            params: s.param_count,
            delta_s,
        };
        let masked = dir.join("masked.json");
        if masked.is_file() {
            let m: MaskedEval = io::read_json(&masked)?;
            rows.push(row("masked-prediction", "accuracy", &m.split, m.masked_acc));
        }
        for (file, suffix) in [("eval.jsonl", ""), ("control.jsonl", " (untrained)")] {
            let p = dir.join(file);
            if p.is_file() {
                for r in io::read_jsonl::<EvalRecord>(&p)? {
                    rows.push(row(&format!("{}{suffix}", task_name(r.task)), &r.metric, &r.split, r.value));
                }
            }
        }
    }
    let mut ablations = Vec::new();
    for i in iterations_under(&out.join("distill")) {
        let p = out.join("distill").join(i.to_string()).join("ablation_curves.jsonl");
        if !p.is_file() {
            continue;
        }
        let points: Vec<CurvePoint> = io::read_jsonl(&p)?;
        let curve = |v: &str| -> Vec<f64> {
            points.iter().filter(|c| c.variant == v).map(|c| c.loss_total).collect()
        };
        let (pca, no_pca) = (curve("pca"), curve("no_pca"));
        let (a, b) = (mean(&pca), mean(&no_pca));
        let observation = if a < b {
            "PCA-supervised run has the lower mean training loss"
        } else {
            "PCA-supervised run does not have the lower mean training loss"
        };
        ablations.push(AblationCurves {
            iteration: i,
            pca,
            no_pca,
            pca_mean_loss: a,
            no_pca_mean_loss: b,
            observation: observation.into(),
        });
    }
    Ok(Report {
        rows,
        training,
        ablations,
    })
}

pub fn render_text(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:<26} {:<9} {:<11} {:>8} {:>10} {:>7}",
        "model", "task", "metric", "split", "value", "params", "dS(%)"
    );
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:<22} {:<26} {:<9} {:<11} {:>8.4} {:>10} {:>7.2}",
            row.model, row.task, row.metric, row.split, row.value, row.params, row.delta_s
        );
    }
    if !r.training.is_empty() {
        let _ = writeln!(s, "\ntraining loss (mean of first / last 10% of steps)");
        for t in &r.training {
            let _ = writeln!(
                s,
                "  iter{} {:<8} {:>6} steps  {:.4} -> {:.4}  ratio {:.4}",
                t.iteration, t.preset, t.steps, t.initial_loss, t.final_loss, t.ratio
            );
        }
    }
    for a in &r.ablations {
        let _ = writeln!(
            s,
            "\nPCA ablation, iteration {}: mean loss {:.4} (pca, {} steps) vs {:.4} (no pca, {} steps)\n  {}",
            a.iteration,
            a.pca_mean_loss,
            a.pca.len(),
            a.no_pca_mean_loss,
            a.no_pca.len(),
            a.observation
        );
    }
    s
}

/// Writes `report/report.{txt,json}` under `out`. An empty report is
/// written with a warning rather than treated as an error.
pub fn cmd_report(out: &Path) -> Result<Report> {
    if !out.is_dir() {
        return Err(Error::Dependency {
            stage: "any".into(),
            path: out.to_path_buf(),
        });
    }
    let report = build_report(out)?;
    if report.rows.is_empty() {
        log::warn!("no evaluation records under {}; writing an empty report", out.display());
    }
    let dir = out.join("report");
    io::write_json(&dir.join("report.json"), &report)?;
    io::write_bytes(&dir.join("report.txt"), render_text(&report).as_bytes())?;
    Ok(report)
}
