//! Cohort assembly: ECG-episode linkage, exclusions, patient-level splits,
//! first-ECG-per-episode evaluation rows and label matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icd::{IcdCode, LabelVocabulary};

/// Unix seconds, UTC.
pub type Timestamp = i64;

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_newtype!(EcgId);
id_newtype!(PatientId);
id_newtype!(EpisodeId);

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("cohort has no patients")]
    EmptyCohort,
    #[error("split fraction {name}={value} out of range")]
    BadFraction { name: &'static str, value: f64 },
    #[error("ECG {0} has no linked episode")]
    UnlinkedRow(EcgId),
    #[error("{file}: line {line}: {msg}")]
    Parse {
        file: &'static str,
        line: u64,
        msg: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EpisodeKind {
    #[serde(rename = "ED")]
    EmergencyDepartment,
    #[serde(rename = "HOSP")]
    Hospitalization,
}

impl EpisodeKind {
    fn as_str(self) -> &'static str {
        match self {
            EpisodeKind::EmergencyDepartment => "ED",
            EpisodeKind::Hospitalization => "HOSP",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub episode_id: EpisodeId,
    pub patient_id: PatientId,
    pub kind: EpisodeKind,
    pub start_time: Timestamp,
    pub end_time: Timestamp,
    /// May be empty; such episodes contribute negatives only.
    pub codes: Vec<IcdCode>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_bit(self) -> u8 {
        match self {
            Sex::Female => 0,
            Sex::Male => 1,
        }
    }

    pub fn from_bit(b: u8) -> Option<Sex> {
        match b {
            0 => Some(Sex::Female),
            1 => Some(Sex::Male),
            _ => None,
        }
    }
}

/// Acquisition quality flags; any set flag excludes the ECG.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QualityFlags {
    pub muscle_artifact: bool,
    pub ac_noise: bool,
    pub baseline_wander: bool,
    pub qrs_clipping: bool,
    pub leads_off: bool,
}

impl QualityFlags {
    pub fn to_bits(self) -> u8 {
        (self.muscle_artifact as u8)
            | (self.ac_noise as u8) << 1
            | (self.baseline_wander as u8) << 2
            | (self.qrs_clipping as u8) << 3
            | (self.leads_off as u8) << 4
    }

    /// Returns `None` when reserved bits 5..7 are set.
    pub fn from_bits(b: u8) -> Option<QualityFlags> {
        if b & !0x1f != 0 {
            return None;
        }
        Some(QualityFlags {
            muscle_artifact: b & 1 != 0,
            ac_noise: b & 2 != 0,
            baseline_wander: b & 4 != 0,
            qrs_clipping: b & 8 != 0,
            leads_off: b & 16 != 0,
        })
    }

    pub fn is_clean(self) -> bool {
        self.to_bits() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcgMeta {
    pub ecg_id: EcgId,
    pub patient_id: PatientId,
    pub acquired_at: Timestamp,
    pub age_years: f32,
    pub sex: Sex,
    pub quality: QualityFlags,
    pub has_device: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub ecg_id: EcgId,
    pub episode_id: EpisodeId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Linkage {
    /// Sorted by (ecg_id, episode_id).
    pub links: Vec<Link>,
    pub unlinked_ecgs: usize,
}

/// Links each ECG to every episode of the same patient whose closed
/// interval `[start, end]` contains the acquisition time.
pub fn link_ecgs(ecgs: &[EcgMeta], episodes: &[Episode]) -> Linkage {
    let mut by_patient: HashMap<PatientId, Vec<&Episode>> = HashMap::new();
    for ep in episodes {
        by_patient.entry(ep.patient_id).or_default().push(ep);
    }
    let mut links = Vec::new();
    let mut unlinked_ecgs = 0;
    for ecg in ecgs {
        let before = links.len();
        if let Some(eps) = by_patient.get(&ecg.patient_id) {
            links.extend(
                eps.iter()
                    .filter(|ep| ep.start_time <= ecg.acquired_at && ecg.acquired_at <= ep.end_time)
                    .map(|ep| Link {
                        ecg_id: ecg.ecg_id,
                        episode_id: ep.episode_id,
                    }),
            );
        }
        if links.len() == before {
            unlinked_ecgs += 1;
        }
    }
    links.sort_unstable();
    links.dedup();
    Linkage {
        links,
        unlinked_ecgs,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    PoorSignalQuality,
    Device,
    Minor,
}

pub const MIN_AGE_YEARS: f32 = 18.0;

pub fn exclusion_reason(ecg: &EcgMeta) -> Option<ExclusionReason> {
    if !ecg.quality.is_clean() {
        Some(ExclusionReason::PoorSignalQuality)
    } else if ecg.has_device {
        Some(ExclusionReason::Device)
    } else if !(ecg.age_years >= MIN_AGE_YEARS) {
        Some(ExclusionReason::Minor)
    } else {
        None
    }
}

/// Keeps clean, device-free adult ECGs.
pub fn apply_exclusions(ecgs: &[EcgMeta]) -> Vec<EcgMeta> {
    ecgs.iter()
        .filter(|e| exclusion_reason(e).is_none())
        .cloned()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    InternalTrain,
    InternalVal,
    External,
}

/// Disjoint patient-level partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub seed: u64,
    pub external: BTreeSet<PatientId>,
    pub internal_train: BTreeSet<PatientId>,
    pub internal_val: BTreeSet<PatientId>,
}

impl CohortSplit {
    pub fn partition_of(&self, p: PatientId) -> Option<Partition> {
        if self.internal_train.contains(&p) {
            Some(Partition::InternalTrain)
        } else if self.internal_val.contains(&p) {
            Some(Partition::InternalVal)
        } else if self.external.contains(&p) {
            Some(Partition::External)
        } else {
            None
        }
    }

    pub fn internal(&self) -> BTreeSet<PatientId> {
        self.internal_train.union(&self.internal_val).copied().collect()
    }

    pub fn to_json(&self) -> Result<String, CohortError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CohortError> {
        let split: CohortSplit = serde_json::from_str(s)?;
        let overlaps = !split.external.is_disjoint(&split.internal_train)
            || !split.external.is_disjoint(&split.internal_val)
            || !split.internal_train.is_disjoint(&split.internal_val);
        if overlaps {
            return Err(CohortError::Parse {
                file: "split manifest",
                line: 0,
                msg: "partitions overlap".into(),
            });
        }
        Ok(split)
    }
}

fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

/// Seeded patient-level split: sort, shuffle, then cut the external prefix
/// and the validation prefix of the internal remainder.
pub fn split_patients(
    patients: &BTreeSet<PatientId>,
    external_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<CohortSplit, CohortError> {
    if !(external_frac > 0.0 && external_frac < 1.0) {
        return Err(CohortError::BadFraction {
            name: "external_frac",
            value: external_frac,
        });
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(CohortError::BadFraction {
            name: "val_frac",
            value: val_frac,
        });
    }
    if patients.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let mut order: Vec<PatientId> = patients.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_ext = round_half_away(external_frac * order.len() as f64).min(order.len());
    let (ext, internal) = order.split_at(n_ext);
    let n_val = round_half_away(val_frac * internal.len() as f64).min(internal.len());
    let (val, train) = internal.split_at(n_val);
    Ok(CohortSplit {
        seed,
        external: ext.iter().copied().collect(),
        internal_train: train.iter().copied().collect(),
        internal_val: val.iter().copied().collect(),
    })
}

/// Earliest linked ECG per episode; equal timestamps resolve to the
/// smallest ECG id. Output sorted by episode id.
pub fn first_ecg_per_episode(links: &[Link], ecgs: &[EcgMeta]) -> Vec<(EpisodeId, EcgId)> {
    let acquired: HashMap<EcgId, Timestamp> = ecgs.iter().map(|e| (e.ecg_id, e.acquired_at)).collect();
    let mut best: BTreeMap<EpisodeId, (Timestamp, EcgId)> = BTreeMap::new();
    for link in links {
        let Some(&t) = acquired.get(&link.ecg_id) else {
            continue;
        };
        let cand = (t, link.ecg_id);
        best.entry(link.episode_id)
            .and_modify(|cur| {
                if cand < *cur {
                    *cur = cand;
                }
            })
            .or_insert(cand);
    }
    best.into_iter().map(|(ep, (_, ecg))| (ep, ecg)).collect()
}

/// Binary rows × labels matrix with per-label prevalence.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub rows: Vec<EcgId>,
    pub vocabulary: LabelVocabulary,
    /// Row-major, entries 0 or 1.
    pub bits: Vec<u8>,
    pub prevalence: Vec<f64>,
}

impl LabelMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_labels(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        let l = self.n_labels();
        &self.bits[i * l..(i + 1) * l]
    }

    pub fn column(&self, j: usize) -> Vec<bool> {
        let l = self.n_labels();
        (0..self.n_rows()).map(|i| self.bits[i * l + j] != 0).collect()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.n_labels()];
        for i in 0..self.n_rows() {
            for (s, &b) in sums.iter_mut().zip(self.row(i)) {
                *s += b as usize;
            }
        }
        sums
    }
}

pub fn build_label_matrix(
    rows: &[EcgId],
    links: &[Link],
    episodes: &[Episode],
    vocab: &LabelVocabulary,
) -> Result<LabelMatrix, CohortError> {
    let by_id: HashMap<EpisodeId, &Episode> = episodes.iter().map(|e| (e.episode_id, e)).collect();
    let mut episodes_of: HashMap<EcgId, Vec<&Episode>> = HashMap::new();
    for link in links {
        if let Some(ep) = by_id.get(&link.episode_id) {
            episodes_of.entry(link.ecg_id).or_default().push(ep);
        }
    }
    let l = vocab.len();
    let mut bits = vec![0u8; rows.len() * l];
    for (i, ecg) in rows.iter().enumerate() {
        let eps = episodes_of.get(ecg).ok_or(CohortError::UnlinkedRow(*ecg))?;
        for ep in eps {
            for j in vocab.indices_for(&ep.codes) {
                bits[i * l + j] = 1;
            }
        }
    }
    let mut m = LabelMatrix {
        rows: rows.to_vec(),
        vocabulary: vocab.clone(),
        bits,
        prevalence: Vec::new(),
    };
    let n = rows.len();
    m.prevalence = m
        .column_sums()
        .into_iter()
        .map(|s| if n == 0 { 0.0 } else { s as f64 / n as f64 })
        .collect();
    Ok(m)
}

// ---------------------------------------------------------------------------
// CSV interchange

pub fn format_timestamp(t: Timestamp) -> String {
    DateTime::<Utc>::from_timestamp(t, 0)
        .map(|d| d.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| t.to_string())
}

pub fn parse_timestamp(s: &str) -> Result<Timestamp, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|d| d.timestamp())
        .map_err(|e| format!("bad ISO-8601 timestamp {s:?}: {e}"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" | "1" | "True" | "TRUE" => Ok(true),
        "false" | "0" | "False" | "FALSE" => Ok(false),
        other => Err(format!("bad boolean {other:?}")),
    }
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, name: &str) -> Result<&'a str, String> {
    rec.get(i).ok_or_else(|| format!("missing column {name}"))
}

fn check_header(
    rdr: &mut csv::Reader<impl Read>,
    expected: &[&str],
    file: &'static str,
) -> Result<(), CohortError> {
    let header = rdr.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(CohortError::Parse {
            file,
            line: 1,
            msg: format!("expected columns {expected:?}, found {got:?}"),
        });
    }
    Ok(())
}

const EPISODE_COLUMNS: [&str; 6] = ["episode_id", "patient_id", "kind", "start_time", "end_time", "codes"];

/// Episode CSV: `episode_id,patient_id,kind,start_time,end_time,codes`,
/// codes separated by `;`.
pub fn write_episodes_csv<W: Write>(w: W, episodes: &[Episode]) -> Result<(), CohortError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(EPISODE_COLUMNS)?;
    for ep in episodes {
        let codes: Vec<&str> = ep.codes.iter().map(IcdCode::as_str).collect();
        wtr.write_record([
            ep.episode_id.to_string(),
            ep.patient_id.to_string(),
            ep.kind.as_str().to_string(),
            format_timestamp(ep.start_time),
            format_timestamp(ep.end_time),
            codes.join(";"),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_episodes_csv<R: Read>(r: R) -> Result<Vec<Episode>, CohortError> {
    const FILE: &str = "episode CSV";
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &EPISODE_COLUMNS, FILE)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = || -> Result<Episode, String> {
            let num = |i, n| -> Result<u64, String> {
                field(&rec, i, n)?
                    .trim()
                    .parse()
                    .map_err(|e| format!("{n}: {e}"))
            };
            let kind = match field(&rec, 2, "kind")?.trim() {
                "ED" => EpisodeKind::EmergencyDepartment,
                "HOSP" => EpisodeKind::Hospitalization,
                other => return Err(format!("kind: unknown episode kind {other:?}")),
            };
            let codes = field(&rec, 5, "codes")?
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|s| IcdCode::parse(s).map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            let ep = Episode {
                episode_id: EpisodeId(num(0, "episode_id")?),
                patient_id: PatientId(num(1, "patient_id")?),
                kind,
                start_time: parse_timestamp(field(&rec, 3, "start_time")?)?,
                end_time: parse_timestamp(field(&rec, 4, "end_time")?)?,
                codes,
            };
            if ep.start_time > ep.end_time {
                return Err("start_time after end_time".into());
            }
            Ok(ep)
        };
        let ep = parse().map_err(|msg| CohortError::Parse { file: FILE, line, msg })?;
        if !seen.insert(ep.episode_id) {
            return Err(CohortError::Parse {
                file: FILE,
                line,
                msg: format!("duplicate episode_id {}", ep.episode_id),
            });
        }
        out.push(ep);
    }
    Ok(out)
}

const META_COLUMNS: [&str; 11] = [
    "ecg_id",
    "patient_id",
    "acquired_at",
    "age_years",
    "sex",
    "muscle_artifact",
    "ac_noise",
    "baseline_wander",
    "qrs_clipping",
    "leads_off",
    "has_device",
];

pub fn write_metadata_csv<W: Write>(w: W, ecgs: &[EcgMeta]) -> Result<(), CohortError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(META_COLUMNS)?;
    for e in ecgs {
        let q = e.quality;
        wtr.write_record([
            e.ecg_id.to_string(),
            e.patient_id.to_string(),
            format_timestamp(e.acquired_at),
            e.age_years.to_string(),
            match e.sex {
                Sex::Male => "M",
                Sex::Female => "F",
            }
            .to_string(),
            q.muscle_artifact.to_string(),
            q.ac_noise.to_string(),
            q.baseline_wander.to_string(),
            q.qrs_clipping.to_string(),
            q.leads_off.to_string(),
            e.has_device.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_metadata_csv<R: Read>(r: R) -> Result<Vec<EcgMeta>, CohortError> {
    const FILE: &str = "ECG metadata CSV";
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &META_COLUMNS, FILE)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = || -> Result<EcgMeta, String> {
            let get = |i| field(&rec, i, META_COLUMNS[i]);
            let num = |i| -> Result<u64, String> {
                get(i)?
                    .trim()
                    .parse()
                    .map_err(|e| format!("{}: {e}", META_COLUMNS[i]))
            };
            let age: f32 = get(3)?
                .trim()
                .parse()
                .map_err(|e| format!("age_years: {e}"))?;
            if !(age >= 0.0 && age.is_finite()) {
                return Err(format!("age_years: {age} must be a nonnegative number"));
            }
            let sex = match get(4)?.trim() {
                "M" => Sex::Male,
                "F" => Sex::Female,
                other => return Err(format!("sex: expected M or F, found {other:?}")),
            };
            Ok(EcgMeta {
                ecg_id: EcgId(num(0)?),
                patient_id: PatientId(num(1)?),
                acquired_at: parse_timestamp(get(2)?)?,
                age_years: age,
                sex,
                quality: QualityFlags {
                    muscle_artifact: parse_bool(get(5)?)?,
                    ac_noise: parse_bool(get(6)?)?,
                    baseline_wander: parse_bool(get(7)?)?,
                    qrs_clipping: parse_bool(get(8)?)?,
                    leads_off: parse_bool(get(9)?)?,
                },
                has_device: parse_bool(get(10)?)?,
            })
        };
        out.push(parse().map_err(|msg| CohortError::Parse { file: FILE, line, msg })?);
    }
    Ok(out)
}

pub fn write_links_csv<W: Write>(w: W, links: &[Link]) -> Result<(), CohortError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["ecg_id", "episode_id"])?;
    for l in links {
        wtr.write_record([l.ecg_id.to_string(), l.episode_id.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_links_csv<R: Read>(r: R) -> Result<Vec<Link>, CohortError> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &["ecg_id", "episode_id"], "links CSV")?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<(u64, u64)>() {
        let (e, p) = row?;
        out.push(Link {
            ecg_id: EcgId(e),
            episode_id: EpisodeId(p),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(id: u64, patient: u64, t: Timestamp) -> EcgMeta {
        EcgMeta {
            ecg_id: EcgId(id),
            patient_id: PatientId(patient),
            acquired_at: t,
            age_years: 40.0,
            sex: Sex::Female,
            quality: QualityFlags::default(),
            has_device: false,
        }
    }

    fn ep(id: u64, patient: u64, start: Timestamp, end: Timestamp, codes: &[&str]) -> Episode {
        Episode {
            episode_id: EpisodeId(id),
            patient_id: PatientId(patient),
            kind: EpisodeKind::EmergencyDepartment,
            start_time: start,
            end_time: end,
            codes: codes.iter().map(|c| IcdCode::parse(c).unwrap()).collect(),
        }
    }

    fn link(e: u64, p: u64) -> Link {
        Link {
            ecg_id: EcgId(e),
            episode_id: EpisodeId(p),
        }
    }

    #[test]
    fn linkage_examples() {
        let r = link_ecgs(&[meta(1, 7, 5)], &[ep(1, 7, 0, 10, &[])]);
        assert_eq!(r.links, vec![link(1, 1)]);

        let r = link_ecgs(&[meta(1, 7, 5)], &[ep(1, 7, 0, 10, &[]), ep(2, 7, 4, 6, &[])]);
        assert_eq!(r.links, vec![link(1, 1), link(1, 2)]);

        let r = link_ecgs(&[meta(1, 7, 11)], &[ep(1, 7, 0, 10, &[])]);
        assert!(r.links.is_empty());
        assert_eq!(r.unlinked_ecgs, 1);

        // Closed interval on both ends, and patient must match.
        let r = link_ecgs(
            &[meta(1, 7, 0), meta(2, 7, 10), meta(3, 8, 5)],
            &[ep(1, 7, 0, 10, &[])],
        );
        assert_eq!(r.links, vec![link(1, 1), link(2, 1)]);
        assert_eq!(r.unlinked_ecgs, 1);
    }

    #[test]
    fn exclusion_examples() {
        let mut minor = meta(1, 1, 0);
        minor.age_years = 17.9;
        let mut wander = meta(2, 1, 0);
        wander.quality.baseline_wander = true;
        let mut device = meta(3, 1, 0);
        device.has_device = true;
        let clean = meta(4, 1, 0);
        let kept = apply_exclusions(&[minor.clone(), wander.clone(), device.clone(), clean.clone()]);
        assert_eq!(kept, vec![clean.clone()]);
        assert_eq!(exclusion_reason(&minor), Some(ExclusionReason::Minor));
        assert_eq!(exclusion_reason(&wander), Some(ExclusionReason::PoorSignalQuality));
        assert_eq!(exclusion_reason(&device), Some(ExclusionReason::Device));
        let mut eighteen = clean;
        eighteen.age_years = 18.0;
        assert_eq!(exclusion_reason(&eighteen), None);
    }

    #[test]
    fn quality_bits_round_trip() {
        for b in 0u8..32 {
            assert_eq!(QualityFlags::from_bits(b).unwrap().to_bits(), b);
        }
        assert!(QualityFlags::from_bits(0x20).is_none());
    }

    fn patients(n: u64) -> BTreeSet<PatientId> {
        (1..=n).map(PatientId).collect()
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        let s = split_patients(&patients(10), 0.4, 0.2, 7).unwrap();
        assert_eq!(s.external.len(), 4);
        assert_eq!(s.internal_val.len(), 1);
        assert_eq!(s.internal_train.len(), 5);

        let s = split_patients(&patients(10), 0.4, 0.0, 7).unwrap();
        assert!(s.internal_val.is_empty());
        assert_eq!(s.internal_train.len(), 6);

        // 0.5 rounds away from zero: 0.25 * 10 = 2.5 -> 3
        let s = split_patients(&patients(10), 0.25, 0.0, 1).unwrap();
        assert_eq!(s.external.len(), 3);
    }

    #[test]
    fn split_membership_matches_seeded_shuffle() {
        let s = split_patients(&patients(10), 0.4, 0.2, 7).unwrap();
        let mut order: Vec<PatientId> = patients(10).into_iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
        let ext: BTreeSet<_> = order[..4].iter().copied().collect();
        let val: BTreeSet<_> = order[4..5].iter().copied().collect();
        assert_eq!(s.external, ext);
        assert_eq!(s.internal_val, val);
        assert_eq!(s, split_patients(&patients(10), 0.4, 0.2, 7).unwrap());
        assert_ne!(s, split_patients(&patients(10), 0.4, 0.2, 8).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_patients(&BTreeSet::new(), 0.4, 0.2, 1),
            Err(CohortError::EmptyCohort)
        ));
        assert!(matches!(
            split_patients(&patients(3), 1.0, 0.2, 1),
            Err(CohortError::BadFraction { .. })
        ));
        assert!(matches!(
            split_patients(&patients(3), 0.4, 1.0, 1),
            Err(CohortError::BadFraction { .. })
        ));
    }

    #[test]
    fn split_manifest_json() {
        let s = split_patients(&patients(5), 0.4, 0.2, 3).unwrap();
        let json = s.to_json().unwrap();
        assert!(json.contains("\"internal_train\""));
        assert_eq!(CohortSplit::from_json(&json).unwrap(), s);
        let bad = r#"{"seed":1,"external":[1],"internal_train":[1],"internal_val":[]}"#;
        assert!(CohortSplit::from_json(bad).is_err());
    }

    #[test]
    fn first_ecg_examples() {
        let ecgs = [meta(1, 1, 3), meta(2, 1, 1), meta(3, 1, 2), meta(9, 2, 1), meta(4, 2, 1)];
        let links = [link(1, 10), link(2, 10), link(3, 10), link(9, 20), link(4, 20)];
        let firsts = first_ecg_per_episode(&links, &ecgs);
        assert_eq!(firsts, vec![(EpisodeId(10), EcgId(2)), (EpisodeId(20), EcgId(4))]);
        assert!(first_ecg_per_episode(&[], &ecgs).is_empty());
    }

    #[test]
    fn label_matrix_examples() {
        use crate::icd::{build_vocabulary, LabelKind};
        let episodes = vec![ep(1, 1, 0, 10, &["I214", "E115"]), ep(2, 2, 0, 10, &["I214"])];
        let links = vec![link(100, 1), link(200, 2)];
        let cats = build_vocabulary(&episodes, &links, LabelKind::Category, 1).unwrap();
        let m = build_label_matrix(&[EcgId(100)], &links, &episodes, &cats).unwrap();
        // vocabulary sorted: E11, I21
        assert_eq!(m.row(0), &[1, 1]);

        let full = crate::icd::LabelVocabulary::from_entries(
            LabelKind::FullCode,
            [crate::icd::VocabEntry {
                label: IcdCode::parse("I219").unwrap(),
                support: 1,
            }],
            1,
        )
        .unwrap();
        let m = build_label_matrix(&[EcgId(200)], &links, &episodes, &full).unwrap();
        assert_eq!(m.row(0), &[0]);
        assert_eq!(m.prevalence, vec![0.0]);

        assert!(matches!(
            build_label_matrix(&[EcgId(300)], &links, &episodes, &full),
            Err(CohortError::UnlinkedRow(EcgId(300)))
        ));
    }

    #[test]
    fn csv_round_trips() {
        let episodes = vec![ep(1, 1, 0, 86_400, &["I214", "E115"]), ep(2, 2, 5, 10, &[])];
        let mut buf = Vec::new();
        write_episodes_csv(&mut buf, &episodes).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("1,1,ED,1970-01-01T00:00:00Z,1970-01-02T00:00:00Z,I214;E115"));
        assert_eq!(read_episodes_csv(&buf[..]).unwrap(), episodes);

        let mut m = meta(5, 2, 1_600_000_000);
        m.age_years = 63.25;
        m.sex = Sex::Male;
        m.quality.qrs_clipping = true;
        let mut buf = Vec::new();
        write_metadata_csv(&mut buf, std::slice::from_ref(&m)).unwrap();
        assert_eq!(read_metadata_csv(&buf[..]).unwrap(), vec![m]);

        let links = vec![link(1, 2), link(3, 4)];
        let mut buf = Vec::new();
        write_links_csv(&mut buf, &links).unwrap();
        assert_eq!(read_links_csv(&buf[..]).unwrap(), links);
    }

    #[test]
    fn csv_errors_name_the_field() {
        let bad = "episode_id,patient_id,kind,start_time,end_time,codes\n1,1,ED,nope,1970-01-01T00:00:00Z,I21\n";
        let err = read_episodes_csv(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("timestamp"), "{err}");
        let bad = "episode_id,patient_id,kind,start_time,end_time,codes\n1,1,ED,1970-01-01T00:00:00Z,1970-01-01T00:00:00Z,I2\n";
        assert!(read_episodes_csv(bad.as_bytes()).is_err());
        let bad = "ecg_id,patient_id\n";
        assert!(read_metadata_csv(bad.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_disjoint_cover(n in 1u64..200, ext in 0.05f64..0.95, val in 0.0f64..0.95, seed: u64) {
            let ps = patients(n);
            let s = split_patients(&ps, ext, val, seed).unwrap();
            prop_assert!(s.external.is_disjoint(&s.internal_train));
            prop_assert!(s.external.is_disjoint(&s.internal_val));
            prop_assert!(s.internal_train.is_disjoint(&s.internal_val));
            let all: BTreeSet<_> = s.external.iter().chain(&s.internal_train).chain(&s.internal_val).copied().collect();
            prop_assert_eq!(all, ps);
        }

        #[test]
        fn first_ecg_is_earliest(times in prop::collection::vec((0i64..20, 0u64..4), 1..40)) {
            let ecgs: Vec<EcgMeta> = times.iter().enumerate().map(|(i, &(t, _))| meta(i as u64, 1, t)).collect();
            let links: Vec<Link> = times.iter().enumerate().map(|(i, &(_, e))| link(i as u64, e)).collect();
            let firsts = first_ecg_per_episode(&links, &ecgs);
            let eps: BTreeSet<_> = firsts.iter().map(|f| f.0).collect();
            prop_assert_eq!(eps.len(), firsts.len());
            for (episode, ecg) in firsts {
                let t = ecgs[ecg.0 as usize].acquired_at;
                for l in links.iter().filter(|l| l.episode_id == episode) {
                    prop_assert!(t <= ecgs[l.ecg_id.0 as usize].acquired_at);
                }
            }
        }

        #[test]
        fn exclusions_are_idempotent(ages in prop::collection::vec((0f32..90.0, 0u8..32, any::<bool>()), 0..30)) {
            let ecgs: Vec<EcgMeta> = ages.iter().enumerate().map(|(i, &(a, q, d))| {
                let mut m = meta(i as u64, 1, 0);
                m.age_years = a;
                m.quality = QualityFlags::from_bits(q).unwrap();
                m.has_device = d;
                m
            }).collect();
            let once = apply_exclusions(&ecgs);
            prop_assert_eq!(apply_exclusions(&once), once.clone());
            prop_assert!(once.iter().all(|m| m.age_years >= 18.0 && !m.has_device && m.quality.is_clean()));
        }

        #[test]
        fn label_matrix_column_sums_match_support(
            eps in prop::collection::vec(prop::collection::vec("[A-B][0-1][0-2][0-2]?", 0..3), 1..6),
            raw in prop::collection::vec((0u64..10, 0usize..6), 1..20),
        ) {
            use crate::icd::{build_vocabulary, LabelKind};
            let episodes: Vec<Episode> = eps.iter().enumerate().map(|(i, cs)| {
                let refs: Vec<&str> = cs.iter().map(String::as_str).collect();
                ep(i as u64, 1, 0, 10, &refs)
            }).collect();
            let mut links: Vec<Link> = raw.iter().map(|&(e, p)| link(e, (p % episodes.len()) as u64)).collect();
            links.sort();
            links.dedup();
            let rows: Vec<EcgId> = links.iter().map(|l| l.ecg_id).collect::<BTreeSet<_>>().into_iter().collect();
            for kind in LabelKind::ALL {
                let v = build_vocabulary(&episodes, &links, kind, 1).unwrap();
                let m = build_label_matrix(&rows, &links, &episodes, &v).unwrap();
                let sums = m.column_sums();
                for (j, e) in v.entries().iter().enumerate() {
                    prop_assert_eq!(sums[j], e.support);
                    prop_assert_eq!(m.prevalence[j], e.support as f64 / rows.len() as f64);
                }
            }
        }
    }
}
