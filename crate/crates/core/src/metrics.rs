//! Rank-based per-label metrics: AUROC (Mann-Whitney with midranks) and
//! average precision.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::LabelMatrix;
use crate::icd::{IcdCode, LabelKind};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labels are all one class ({n_pos} positives of {n})")]
    DegenerateLabels { n_pos: usize, n: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("metrics file: {0}")]
    Parse(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<usize, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    Ok(labels.iter().filter(|&&y| y).count())
}

/// Indices sorted by descending score, ties in index order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Area under the ROC curve. Tied scores contribute one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let n = labels.len();
    let n_pos = check_inputs(scores, labels)?;
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::DegenerateLabels { n_pos, n });
    }
    let mut idx = descending_order(scores);
    idx.reverse();
    // Ascending ranks 1..n, tie groups share their mean rank.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = idx[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += midrank * pos_in_group as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: mean over positives of the precision at the
/// positive's rank. Tied scores form one threshold; every positive in the
/// group gets the precision measured at the end of the group.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let n = labels.len();
    let n_pos = check_inputs(scores, labels)?;
    if n_pos == 0 {
        return Err(MetricsError::DegenerateLabels { n_pos, n });
    }
    let idx = descending_order(scores);
    let mut tp = 0usize;
    let mut total = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos_in_group = idx[i..j].iter().filter(|&&k| labels[k]).count();
        tp += pos_in_group;
        let precision = tp as f64 / j as f64;
        for _ in 0..pos_in_group {
            total += precision;
        }
        i = j;
    }
    Ok(total / n_pos as f64)
}

/// Evaluation summary for one label column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: IcdCode,
    pub kind: LabelKind,
    pub n_eval: usize,
    pub n_pos: usize,
    pub prevalence: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

impl LabelMetrics {
    pub fn compute(
        label: IcdCode,
        kind: LabelKind,
        scores: &[f64],
        labels: &[bool],
    ) -> Result<Self, MetricsError> {
        let n_pos = check_inputs(scores, labels)?;
        let n_eval = labels.len();
        let degenerate = n_pos == 0 || n_pos == n_eval;
        let (auroc, auprc) = if degenerate {
            (None, None)
        } else {
            (Some(auroc(scores, labels)?), Some(auprc(scores, labels)?))
        };
        Ok(LabelMetrics {
            label,
            kind,
            n_eval,
            n_pos,
            prevalence: if n_eval == 0 { 0.0 } else { n_pos as f64 / n_eval as f64 },
            auroc,
            auprc,
        })
    }

    /// All-positive or all-negative column; metrics are absent.
    pub fn is_degenerate(&self) -> bool {
        self.auroc.is_none()
    }
}

/// Per-column metrics of an `N × L` probability matrix (row-major).
pub fn evaluate_labels(probs: &[f32], labels: &LabelMatrix) -> Result<Vec<LabelMetrics>, MetricsError> {
    let (n, l) = (labels.n_rows(), labels.n_labels());
    if probs.len() != n * l {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} probabilities for {n} rows x {l} labels",
            probs.len()
        )));
    }
    let kind = labels.vocabulary.kind();
    let out: Vec<LabelMetrics> = (0..l)
        .into_par_iter()
        .map(|j| {
            let scores: Vec<f64> = (0..n).map(|i| probs[i * l + j] as f64).collect();
            let column = labels.column(j);
            LabelMetrics::compute(labels.vocabulary.label(j).clone(), kind, &scores, &column)
        })
        .collect::<Result<_, _>>()?;
    for m in out.iter().filter(|m| m.is_degenerate()) {
        log::warn!(
            "label {} ({}) is degenerate on {} rows ({} positives); metrics absent",
            m.label,
            m.kind,
            m.n_eval,
            m.n_pos
        );
    }
    Ok(out)
}

const METRIC_COLUMNS: [&str; 7] = ["label", "kind", "n_eval", "n_pos", "prevalence", "auroc", "auprc"];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(w: W, metrics: &[LabelMetrics]) -> Result<(), MetricsError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(METRIC_COLUMNS)?;
    for m in metrics {
        wtr.write_record([
            m.label.to_string(),
            m.kind.to_string(),
            m.n_eval.to_string(),
            m.n_pos.to_string(),
            m.prevalence.to_string(),
            opt(m.auroc),
            opt(m.auprc),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<LabelMetrics>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != METRIC_COLUMNS {
        return Err(MetricsError::Parse(format!("unexpected columns {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |col: &str, e: &dyn std::fmt::Display| MetricsError::Parse(format!("line {line}: {col}: {e}"));
        let get = |i: usize| rec.get(i).unwrap_or("").trim();
        let float = |i: usize| -> Result<Option<f64>, MetricsError> {
            match get(i) {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|e| err(METRIC_COLUMNS[i], &e)),
            }
        };
        let count = |i: usize| -> Result<usize, MetricsError> { get(i).parse().map_err(|e| err(METRIC_COLUMNS[i], &e)) };
        out.push(LabelMetrics {
            label: IcdCode::parse(get(0)).map_err(|e| err("label", &e))?,
            kind: get(1).parse().map_err(|e: String| err("kind", &e))?,
            n_eval: count(2)?,
            n_pos: count(3)?,
            prevalence: float(4)?.ok_or_else(|| err("prevalence", &"missing"))?,
            auroc: float(5)?,
            auprc: float(6)?,
        });
    }
    Ok(out)
}
