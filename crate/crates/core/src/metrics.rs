//! Evaluation metrics, threshold sweeps and report files.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matcher::decide;
use crate::model::{ModelError, NopeModel, PairScores, Switches};
use crate::pose::rotation_error_metric;
use crate::synth::InstancePair;
use crate::wire::packet_size;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub index: usize,
    pub overlap_true: bool,
    pub overlap_pred: bool,
    pub true_matches: usize,
    pub pred_matches: usize,
    pub correct_matches: usize,
    /// Present whenever a pose was estimated.
    pub pe: Option<f64>,
    pub re: Option<f64>,
    pub ps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub nda: f64,
    /// Over true-overlap instances with predicted overlap.
    pub mean_pe: f64,
    pub median_pe: f64,
    pub mean_re: f64,
    /// Over every instance for which a pose was emitted.
    pub mean_pe_emitted: f64,
    /// True-overlap instances predicted non-overlapping.
    pub missed: usize,
    pub mean_ps: f64,
    pub rows: Vec<InstanceRow>,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        if num == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    if s.len() % 2 == 1 {
        s[k]
    } else {
        0.5 * (s[k - 1] + s[k])
    }
}

impl MetricsReport {
    /// Aggregates per-instance rows. Precision and recall are pooled over
    /// all correspondences; a ratio with an empty denominator is 1 when its
    /// numerator is also empty.
    pub fn from_rows(rows: Vec<InstanceRow>) -> Self {
        let tp: usize = rows.iter().map(|r| r.correct_matches).sum();
        let pred: usize = rows.iter().map(|r| r.pred_matches).sum();
        let truth: usize = rows.iter().map(|r| r.true_matches).sum();
        let precision = ratio(tp, pred);
        let recall = ratio(tp, truth);
        let correct = rows.iter().filter(|r| r.overlap_true == r.overlap_pred).count();
        let scored: Vec<&InstanceRow> = rows.iter().filter(|r| r.overlap_true && r.overlap_pred).collect();
        let pe: Vec<f64> = scored.iter().filter_map(|r| r.pe).collect();
        let re: Vec<f64> = scored.iter().filter_map(|r| r.re).collect();
        let emitted: Vec<f64> = rows.iter().filter_map(|r| r.pe).collect();
        let ps: Vec<f64> = rows.iter().map(|r| r.ps as f64).collect();
        Self {
            instances: rows.len(),
            precision,
            recall,
            f1: f1_score(precision, recall),
            nda: if rows.is_empty() { 0.0 } else { correct as f64 / rows.len() as f64 },
            mean_pe: mean(&pe),
            median_pe: median(&pe),
            mean_re: mean(&re),
            mean_pe_emitted: mean(&emitted),
            missed: rows.iter().filter(|r| r.overlap_true && !r.overlap_pred).count(),
            mean_ps: mean(&ps),
            rows,
        }
    }

    pub const CSV_HEADER: &'static str = "index,overlap_true,overlap_pred,true_matches,pred_matches,correct_matches,pe,re,ps";

    /// Header plus one line per instance; missing poses are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.index,
                r.overlap_true,
                r.overlap_pred,
                r.true_matches,
                r.pred_matches,
                r.correct_matches,
                cell(r.pe),
                cell(r.re),
                r.ps
            )
            .expect("string write");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Writes `csv` or `json`.
    pub fn write(&self, path: &Path, format: ReportFormat) -> std::io::Result<()> {
        let body = match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        };
        std::fs::write(path, body)
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "P={:.4} R={:.4} F1={:.4} NDA={:.4} PE(mean/median)={:.3}/{:.3} m RE={:.4} missed={} PS={:.0} B",
            self.precision,
            self.recall,
            self.f1,
            self.nda,
            self.mean_pe,
            self.median_pe,
            self.mean_re,
            self.missed,
            self.mean_ps
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(format!("unknown report format `{s}` (csv|json)")),
        }
    }
}

/// Scores every pair once so several thresholds can reuse them.
pub fn score_dataset(model: &NopeModel, data: &[InstancePair], consensus: bool) -> Result<Vec<PairScores>, ModelError> {
    data.par_iter()
        .map(|p| model.score_pair(&p.ego, &p.mate, consensus))
        .collect()
}

fn row_for(
    model: &NopeModel,
    index: usize,
    pair: &InstancePair,
    scores: &PairScores,
    tau: f64,
    switches: Switches,
    with_pose: bool,
) -> Result<InstanceRow, ModelError> {
    let (correspondence, pose) = if with_pose {
        let inf = model.infer_from_scores(scores, tau, switches)?;
        (inf.correspondence, inf.pose)
    } else {
        (decide(scores.similarity.clone(), scores.difference.clone(), tau), None)
    };
    let pred = correspondence.pairs();
    let correct = pred.iter().filter(|(i, j)| pair.truth.at(*i, *j) == 1.0).count();
    Ok(InstanceRow {
        index,
        overlap_true: pair.overlap,
        overlap_pred: correspondence.overlap,
        true_matches: pair.matches().len(),
        pred_matches: pred.len(),
        correct_matches: correct,
        pe: pose.map(|p| p.position_error(&pair.pose)),
        re: pose.map(|p| rotation_error_metric(&p, &pair.pose)),
        ps: packet_size(&pair.mate),
    })
}

/// Full pipeline on every pair.
pub fn evaluate(model: &NopeModel, data: &[InstancePair], tau: f64, switches: Switches) -> Result<MetricsReport, ModelError> {
    let scores = score_dataset(model, data, switches.consensus)?;
    evaluate_scored(model, data, &scores, tau, switches)
}

pub fn evaluate_scored(
    model: &NopeModel,
    data: &[InstancePair],
    scores: &[PairScores],
    tau: f64,
    switches: Switches,
) -> Result<MetricsReport, ModelError> {
    let rows = data
        .par_iter()
        .zip(scores)
        .enumerate()
        .map(|(k, (p, s))| row_for(model, k, p, s, tau, switches, true))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport::from_rows(rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub nda: f64,
    pub f1: f64,
}

/// Re-runs only the decision stage per threshold.
pub fn sweep_tau(model: &NopeModel, data: &[InstancePair], grid: &[f64], consensus: bool) -> Result<Vec<SweepRow>, ModelError> {
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(ModelError::Checkpoint("tau grid must be non-empty with values in (0, 1]".into()));
    }
    let scores = score_dataset(model, data, consensus)?;
    let switches = Switches {
        consensus,
        gating: true,
    };
    grid.iter()
        .map(|&tau| {
            let rows = data
                .par_iter()
                .zip(&scores)
                .enumerate()
                .map(|(k, (p, s))| row_for(model, k, p, s, tau, switches, false))
                .collect::<Result<Vec<_>, _>>()?;
            let r = MetricsReport::from_rows(rows);
            Ok(SweepRow {
                tau,
                nda: r.nda,
                f1: r.f1,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("tau,nda,f1\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6}", r.tau, r.nda, r.f1).expect("string write");
    }
    s
}

/// Pose predicted as the mean training pose, for reference.
pub fn mean_pose_baseline(train: &[InstancePair], test: &[InstancePair]) -> (f64, f64) {
    let poses: Vec<_> = train.iter().filter(|p| p.overlap).map(|p| p.pose.canonical()).collect();
    if poses.is_empty() {
        return (0.0, 0.0);
    }
    let n = poses.len() as f64;
    let mut p = [0.0; 3];
    let mut q = [0.0; 4];
    for pose in &poses {
        (0..3).for_each(|k| p[k] += pose.position[k] / n);
        (0..4).for_each(|k| q[k] += pose.orientation[k] / n);
    }
    let guess = crate::geometry::RelativePose::new(p, q);
    let targets: Vec<_> = test.iter().filter(|t| t.overlap).collect();
    let pe: Vec<f64> = targets.iter().map(|t| guess.position_error(&t.pose)).collect();
    let re: Vec<f64> = targets.iter().map(|t| rotation_error_metric(&guess, &t.pose)).collect();
    (median(&pe), mean(&re))
}
