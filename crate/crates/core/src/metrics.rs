//! Task metrics, per-condition evaluation rows and the report files.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shifts::ShiftSpec;
use crate::training::Task;
use crate::uncertainty::{agreement_index, mc_mean, mc_var, McdPredictionSet};

pub const REPORT_JSONL: &str = "report.jsonl";
pub const REPORT_PIVOT: &str = "report_pivot.csv";

/// Area under the ROC curve by the Mann-Whitney rank statistic. Tied scores
/// receive midranks, so every tied positive/negative pair counts one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_pos += mid2 * pos;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(Error::InvalidParameter("mae of empty vectors".into()));
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

/// Rounds to 6 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pop_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// One (dataset, shift, encoder, task) condition. Task metrics are the mean
/// and spread over MC repeats of recording-level scores; `*_of_mean` scores
/// the repeat-averaged predictions instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub dataset: String,
    pub shift: ShiftSpec,
    pub encoder: String,
    pub task: Task,
    pub auc: Option<f64>,
    pub auc_sd: Option<f64>,
    pub auc_of_mean: Option<f64>,
    pub mae: Option<f64>,
    pub mae_sd: Option<f64>,
    pub mae_of_mean: Option<f64>,
    pub phi_median: Option<f64>,
    pub phi_mean: Option<f64>,
    pub phi_raw_mean: Option<f64>,
    /// Mean over recordings of the prediction SD across repeats.
    pub sd: f64,
    pub n_recordings: usize,
}

impl EvaluationRow {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.task {
            Task::Grade => self.auc.is_some() && self.mae.is_none(),
            Task::Age => self.mae.is_some() && self.auc.is_none(),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "row metrics do not match task {}",
                self.task
            )));
        }
        let values = [
            self.auc,
            self.auc_sd,
            self.auc_of_mean,
            self.mae,
            self.mae_sd,
            self.mae_of_mean,
            self.phi_median,
            self.phi_mean,
            self.phi_raw_mean,
            Some(self.sd),
        ];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("evaluation row".into()));
        }
        Ok(())
    }

    /// Report row order: shift kind and strength, then dataset, encoder, task.
    pub fn report_cmp(&self, other: &Self) -> Ordering {
        self.shift
            .report_order(&other.shift)
            .then_with(|| self.dataset.cmp(&other.dataset))
            .then_with(|| self.encoder.cmp(&other.encoder))
            .then_with(|| self.task.as_str().cmp(other.task.as_str()))
    }
}

/// Recording-level MC predictions with the recording's target.
#[derive(Debug, Clone)]
pub struct ScoredRecording {
    pub predictions: McdPredictionSet,
    pub target: f64,
}

/// Builds the evaluation row of one condition. Metric values are rounded to
/// 6 significant digits.
pub fn summarize_condition(
    dataset: &str,
    shift: &ShiftSpec,
    encoder: &str,
    task: Task,
    recordings: &[ScoredRecording],
    tau: f64,
) -> Result<EvaluationRow> {
    let first = recordings
        .first()
        .ok_or_else(|| Error::InvalidParameter("no recordings to evaluate".into()))?;
    let repeats = first.predictions.repeats();
    if let Some(r) = recordings
        .iter()
        .find(|r| r.predictions.repeats() != repeats || r.predictions.task != task)
    {
        return Err(Error::InvalidParameter(format!(
            "recording {} does not match the condition's repeats or task",
            r.predictions.input_id
        )));
    }
    let targets: Vec<f64> = recordings.iter().map(|r| r.target).collect();
    let at_repeat = |t: usize| -> Vec<f64> { recordings.iter().map(|r| r.predictions.predictions[t]).collect() };
    let means: Vec<f64> = recordings.iter().map(|r| mc_mean(&r.predictions)).collect();
    let sds: Vec<f64> = recordings.iter().map(|r| mc_var(&r.predictions).sqrt()).collect();
    let mut row = EvaluationRow {
        dataset: dataset.to_string(),
        shift: *shift,
        encoder: encoder.to_string(),
        task,
        auc: None,
        auc_sd: None,
        auc_of_mean: None,
        mae: None,
        mae_sd: None,
        mae_of_mean: None,
        phi_median: None,
        phi_mean: None,
        phi_raw_mean: None,
        sd: round_sig(mean(&sds)),
        n_recordings: recordings.len(),
    };
    match task {
        Task::Grade => {
            let labels: Vec<bool> = targets.iter().map(|&t| t >= 0.5).collect();
            let per_repeat = (0..repeats)
                .map(|t| auc(&at_repeat(t), &labels))
                .collect::<Result<Vec<_>>>()?;
            row.auc = Some(round_sig(mean(&per_repeat)));
            row.auc_sd = Some(round_sig(pop_sd(&per_repeat)));
            row.auc_of_mean = Some(round_sig(auc(&means, &labels)?));
            let phis = recordings
                .iter()
                .map(|r| agreement_index(&r.predictions, tau))
                .collect::<Result<Vec<_>>>()?;
            let agreement: Vec<f64> = phis.iter().map(|p| p.agreement).collect();
            let raw: Vec<f64> = phis.iter().map(|p| p.phi_raw).collect();
            row.phi_median = Some(round_sig(median(&agreement)));
            row.phi_mean = Some(round_sig(mean(&agreement)));
            row.phi_raw_mean = Some(round_sig(mean(&raw)));
        }
        Task::Age => {
            let per_repeat = (0..repeats)
                .map(|t| mae(&at_repeat(t), &targets))
                .collect::<Result<Vec<_>>>()?;
            row.mae = Some(round_sig(mean(&per_repeat)));
            row.mae_sd = Some(round_sig(pop_sd(&per_repeat)));
            row.mae_of_mean = Some(round_sig(mae(&means, &targets)?));
        }
    }
    row.validate()?;
    Ok(row)
}

pub fn sort_rows(rows: &mut [EvaluationRow]) {
    rows.sort_by(EvaluationRow::report_cmp);
}

/// JSON lines, one row per line, in report order.
pub fn report_jsonl(rows: &[EvaluationRow]) -> Result<String> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut out = String::new();
    for row in &sorted {
        row.validate()?;
        out.push_str(&serde_json::to_string(row).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_report(text: &str) -> Result<Vec<EvaluationRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("report line {}: {e}", i + 1))))
        .collect()
}

pub fn read_report(path: &Path) -> Result<Vec<EvaluationRow>> {
    let file = fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(rows)
}

/// Table of shift rows against metric/encoder columns. Grade tasks fill the
/// `auc` and `phi` columns, age tasks `mae` and `sd`.
pub fn report_pivot(rows: &[EvaluationRow]) -> String {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let encoders: BTreeSet<&str> = sorted.iter().map(|r| r.encoder.as_str()).collect();
    let metrics = [
        ("auc", Task::Grade),
        ("mae", Task::Age),
        ("phi", Task::Grade),
        ("sd", Task::Age),
    ];
    let mut out = String::from("shift,dataset");
    for (m, _) in metrics {
        for e in &encoders {
            out.push_str(&format!(",{m}:{e}"));
        }
    }
    out.push('\n');
    let mut keys: Vec<(&ShiftSpec, &str)> = Vec::new();
    for r in &sorted {
        if !keys.iter().any(|(s, d)| **s == r.shift && *d == r.dataset) {
            keys.push((&r.shift, &r.dataset));
        }
    }
    for (shift, dataset) in keys {
        out.push_str(&format!("\"{shift}\",{dataset}"));
        for (m, task) in metrics {
            for e in &encoders {
                let cell = sorted
                    .iter()
                    .find(|r| r.shift == *shift && r.dataset == dataset && r.encoder == *e && r.task == task)
                    .and_then(|r| match m {
                        "auc" => r.auc,
                        "mae" => r.mae,
                        "phi" => r.phi_mean,
                        _ => Some(r.sd),
                    });
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&v.to_string());
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `report.jsonl` and `report_pivot.csv` into `dir`.
pub fn emit_report(rows: &[EvaluationRow], dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("report needs at least one row".into()));
    }
    fs::create_dir_all(dir)?;
    let write = |name: &str, text: &str| -> Result<()> {
        let mut f = fs::File::create(dir.join(name))?;
        f.write_all(text.as_bytes())?;
        Ok(())
    };
    write(REPORT_JSONL, &report_jsonl(rows)?)?;
    write(REPORT_PIVOT, &report_pivot(rows))
}
