//! Two-stage label screening: internal selection by AUROC tier plus a
//! precision filter, then replication on the external holdout.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icd::{IcdCode, LabelKind};
use crate::metrics::LabelMetrics;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScreenError {
    #[error("selected label {label} ({kind}) has no external metrics")]
    UnknownLabel { label: IcdCode, kind: LabelKind },
    #[error("invalid selection rule: {0}")]
    InvalidRule(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// AUROC gates are strict (`>`); the precision branches are inclusive (`>=`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    /// Ascending `[T80, T90]` AUROC thresholds.
    pub auroc_tiers: [f64; 2],
    pub min_auprc: f64,
    /// Required ratio of average precision to prevalence.
    pub precision_lift: f64,
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule {
            auroc_tiers: [0.80, 0.90],
            min_auprc: 0.05,
            precision_lift: 20.0,
        }
    }
}

impl SelectionRule {
    pub fn validate(&self) -> Result<(), ScreenError> {
        let [lo, hi] = self.auroc_tiers;
        if !(0.0..1.0).contains(&lo) || !(lo < hi && hi < 1.0) {
            return Err(ScreenError::InvalidRule(format!("tiers {lo}, {hi} must ascend within [0,1)")));
        }
        if !(self.min_auprc > 0.0 && self.min_auprc < 1.0) {
            return Err(ScreenError::InvalidRule(format!("min_auprc {} not in (0,1)", self.min_auprc)));
        }
        if !(self.precision_lift > 1.0) {
            return Err(ScreenError::InvalidRule(format!("precision_lift {} must exceed 1", self.precision_lift)));
        }
        Ok(())
    }

    pub fn threshold(&self, tier: Tier) -> f64 {
        match tier {
            Tier::T80 => self.auroc_tiers[0],
            Tier::T90 => self.auroc_tiers[1],
        }
    }

    /// Tier a metrics row qualifies for, if any.
    pub fn classify(&self, m: &LabelMetrics) -> Option<Tier> {
        let (auroc, auprc) = (m.auroc?, m.auprc?);
        if !(auroc > self.auroc_tiers[0]) {
            return None;
        }
        let precise = auprc >= self.min_auprc || auprc >= self.precision_lift * m.prevalence;
        if !precise {
            return None;
        }
        Some(if auroc > self.auroc_tiers[1] { Tier::T90 } else { Tier::T80 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    T80,
    T90,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedLabel {
    pub label: IcdCode,
    pub kind: LabelKind,
    pub tier: Tier,
    pub internal: LabelMetrics,
    pub external: Option<LabelMetrics>,
    /// External AUROC clears this label's own tier threshold.
    pub replicated: Option<bool>,
    /// External column had no positives or no negatives.
    #[serde(default)]
    pub external_degenerate: bool,
}

pub fn select_labels(internal_metrics: &[LabelMetrics], rule: &SelectionRule) -> Vec<SelectedLabel> {
    internal_metrics
        .iter()
        .filter_map(|m| {
            rule.classify(m).map(|tier| SelectedLabel {
                label: m.label.clone(),
                kind: m.kind,
                tier,
                internal: m.clone(),
                external: None,
                replicated: None,
                external_degenerate: false,
            })
        })
        .collect()
}

pub fn replicate(
    selected: &[SelectedLabel],
    external_metrics: &[LabelMetrics],
    rule: &SelectionRule,
) -> Result<Vec<SelectedLabel>, ScreenError> {
    let by_label: BTreeMap<(LabelKind, &IcdCode), &LabelMetrics> =
        external_metrics.iter().map(|m| ((m.kind, &m.label), m)).collect();
    selected
        .iter()
        .map(|s| {
            let ext = by_label.get(&(s.kind, &s.label)).ok_or_else(|| ScreenError::UnknownLabel {
                label: s.label.clone(),
                kind: s.kind,
            })?;
            let mut out = s.clone();
            out.external = Some((*ext).clone());
            out.external_degenerate = ext.is_degenerate();
            out.replicated = Some(ext.auroc.is_some_and(|a| a > rule.threshold(s.tier)));
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChapterGroup {
    pub chapter: String,
    /// Internal AUROC, descending.
    pub entries: Vec<SelectedLabel>,
}

/// Paper-style accounting for one AUROC threshold: every selected label at
/// or above the tier, and how many cleared the same threshold externally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierSummary {
    pub threshold: f64,
    pub selected: usize,
    pub replicated: usize,
    pub replication_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: LabelKind,
    pub chapters: Vec<ChapterGroup>,
    pub selected: usize,
    /// Labels replicated at their own tier.
    pub replicated: usize,
    pub tiers: Vec<TierSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub schema_version: u32,
    pub rule: SelectionRule,
    pub boundary_semantics: String,
    /// Seeds, config digest, dataset digests and anything else the caller records.
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub kinds: Vec<KindReport>,
}

fn rate(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn kind_report(kind: LabelKind, selected: &[SelectedLabel], rule: &SelectionRule) -> KindReport {
    let mut groups: BTreeMap<String, Vec<SelectedLabel>> = BTreeMap::new();
    for s in selected {
        groups.entry(s.label.chapter()).or_default().push(s.clone());
    }
    let chapters = groups
        .into_iter()
        .map(|(chapter, mut entries)| {
            entries.sort_by(|a, b| {
                let (x, y) = (a.internal.auroc.unwrap_or(0.0), b.internal.auroc.unwrap_or(0.0));
                y.total_cmp(&x).then_with(|| a.label.cmp(&b.label))
            });
            ChapterGroup { chapter, entries }
        })
        .collect();
    let ext_auroc = |s: &SelectedLabel| s.external.as_ref().and_then(|m| m.auroc);
    let tiers = [Tier::T80, Tier::T90]
        .into_iter()
        .map(|tier| {
            let threshold = rule.threshold(tier);
            let members: Vec<&SelectedLabel> = selected.iter().filter(|s| s.tier >= tier).collect();
            let replicated = members
                .iter()
                .filter(|s| ext_auroc(s).is_some_and(|a| a > threshold))
                .count();
            TierSummary {
                threshold,
                selected: members.len(),
                replicated,
                replication_rate: rate(replicated, members.len()),
            }
        })
        .collect();
    KindReport {
        kind,
        chapters,
        selected: selected.len(),
        replicated: selected.iter().filter(|s| s.replicated == Some(true)).count(),
        tiers,
    }
}

pub fn build_report(
    by_kind: &[(LabelKind, Vec<SelectedLabel>)],
    rule: &SelectionRule,
    metadata: BTreeMap<String, serde_json::Value>,
) -> ScreenReport {
    ScreenReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rule: rule.clone(),
        boundary_semantics: format!(
            "selected iff auroc > {} and (auprc >= {} or auprc >= {} * prevalence); \
             T90 iff auroc > {}; replicated iff external auroc > own tier threshold",
            rule.auroc_tiers[0], rule.min_auprc, rule.precision_lift, rule.auroc_tiers[1]
        ),
        metadata,
        kinds: by_kind
            .iter()
            .map(|(kind, sel)| kind_report(*kind, sel, rule))
            .collect(),
    }
}

const REPORT_COLUMNS: [&str; 9] = [
    "kind",
    "chapter",
    "label",
    "tier",
    "auroc_internal",
    "auprc_internal",
    "prevalence_internal",
    "auroc_external",
    "replicated",
];

impl ScreenReport {
    pub fn to_json(&self) -> Result<String, ScreenError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ScreenError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ScreenError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(REPORT_COLUMNS)?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for k in &self.kinds {
            for g in &k.chapters {
                for e in &g.entries {
                    wtr.write_record([
                        k.kind.to_string(),
                        g.chapter.clone(),
                        e.label.to_string(),
                        format!("{:?}", e.tier),
                        opt(e.internal.auroc),
                        opt(e.internal.auprc),
                        e.internal.prevalence.to_string(),
                        opt(e.external.as_ref().and_then(|m| m.auroc)),
                        e.replicated.map(|r| r.to_string()).unwrap_or_default(),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn emit_report(report: &ScreenReport, dir: &Path) -> Result<(), ScreenError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    report.write_csv(fs::File::create(dir.join("report.csv"))?)?;
    Ok(())
}
