//! ICD-wide ECG screening pipeline.
//!
//! Cohorts of 12-lead ECGs linked to ICD-10 coded episodes are split by
//! patient, a residual 1D CNN is trained per label space (full codes and
//! 3-character categories), and labels are kept when they clear AUROC
//! tiers plus a precision filter internally and then replicate on an
//! external patient-disjoint holdout.

pub mod autodiff;
pub mod cli;
pub mod cohort;
pub mod icd;
pub mod metrics;
pub mod model;
pub mod screen;
pub mod signal;
pub mod synthgen;

pub use cohort::{EcgId, EpisodeId, PatientId};
pub use icd::{IcdCode, LabelKind, LabelVocabulary};
