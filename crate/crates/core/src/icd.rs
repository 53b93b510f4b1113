//! ICD-10 code parsing, category truncation and label vocabularies.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{EcgId, Episode, EpisodeId, Link};

/// Default minimum number of distinct linked ECGs for a label to be modelled.
pub const DEFAULT_MIN_SUPPORT: usize = 1000;

#[derive(Debug, Error)]
pub enum IcdError {
    #[error("malformed ICD-10 code {raw:?}: {reason}")]
    MalformedCode { raw: String, reason: &'static str },
    #[error("ECG {ecg} links to unknown episode {episode}")]
    DanglingLink { ecg: EcgId, episode: EpisodeId },
    #[error("min_support must be at least 1")]
    InvalidMinSupport,
    #[error("vocabulary file is inconsistent: {0}")]
    BadVocabulary(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A syntactically valid ICD-10 code: 3 to 7 uppercase characters, a
/// leading letter, the rest letters or digits. No dot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct IcdCode(String);

impl IcdCode {
    pub fn parse(raw: &str) -> Result<Self, IcdError> {
        let norm = raw.trim().to_ascii_uppercase();
        let bad = |reason| IcdError::MalformedCode {
            raw: raw.to_string(),
            reason,
        };
        if !norm.is_ascii() {
            return Err(bad("non-ASCII character"));
        }
        if norm.len() < 3 {
            return Err(bad("shorter than 3 characters"));
        }
        if norm.len() > 7 {
            return Err(bad("longer than 7 characters"));
        }
        let mut chars = norm.chars();
        if !chars.next().is_some_and(|c| c.is_ascii_uppercase()) {
            return Err(bad("first character must be a letter"));
        }
        if !chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit()) {
            return Err(bad("illegal character"));
        }
        Ok(IcdCode(norm))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The 3-character category (`I214` -> `I21`).
    pub fn category(&self) -> IcdCode {
        IcdCode(self.0[..3].to_string())
    }

    /// Presentation group used by reports: the leading letter.
    pub fn chapter(&self) -> String {
        self.0[..1].to_string()
    }

    pub fn is_category(&self) -> bool {
        self.0.len() == 3
    }
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for IcdCode {
    type Err = IcdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IcdCode::parse(s)
    }
}

impl TryFrom<String> for IcdCode {
    type Error = IcdError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        IcdCode::parse(&s)
    }
}

impl From<IcdCode> for String {
    fn from(c: IcdCode) -> String {
        c.0
    }
}

pub fn parse_code(raw: &str) -> Result<IcdCode, IcdError> {
    IcdCode::parse(raw)
}

pub fn category_of(code: &IcdCode) -> IcdCode {
    code.category()
}

pub fn chapter_of(code: &IcdCode) -> String {
    code.chapter()
}

/// Output space of a classifier: exact codes or truncated categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelKind {
    #[serde(rename = "code")]
    FullCode,
    #[serde(rename = "category")]
    Category,
}

impl LabelKind {
    pub const ALL: [LabelKind; 2] = [LabelKind::FullCode, LabelKind::Category];

    /// Maps an episode code onto this label space.
    pub fn label_for(self, code: &IcdCode) -> IcdCode {
        match self {
            LabelKind::FullCode => code.clone(),
            LabelKind::Category => code.category(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::FullCode => "code",
            LabelKind::Category => "category",
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "code" | "full" | "FullCode" => Ok(LabelKind::FullCode),
            "category" | "Category" => Ok(LabelKind::Category),
            other => Err(format!("unknown label kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub label: IcdCode,
    /// Distinct ECGs linked to at least one episode carrying the label.
    pub support: usize,
}

/// Supported labels, sorted by label text; position is the classifier output index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocabulary {
    kind: LabelKind,
    entries: Vec<VocabEntry>,
    min_support: usize,
    index: HashMap<IcdCode, usize>,
}

impl LabelVocabulary {
    /// Builds a vocabulary from pre-counted entries. Entries below
    /// `min_support` are dropped; the rest are sorted and deduplicated.
    pub fn from_entries(
        kind: LabelKind,
        entries: impl IntoIterator<Item = VocabEntry>,
        min_support: usize,
    ) -> Result<Self, IcdError> {
        if min_support == 0 {
            return Err(IcdError::InvalidMinSupport);
        }
        let mut by_label = BTreeMap::new();
        for e in entries {
            if kind == LabelKind::Category && !e.label.is_category() {
                return Err(IcdError::BadVocabulary(format!(
                    "category label {} is not 3 characters",
                    e.label
                )));
            }
            if by_label.insert(e.label.clone(), e.support).is_some() {
                return Err(IcdError::BadVocabulary(format!("duplicate label {}", e.label)));
            }
        }
        let entries: Vec<VocabEntry> = by_label
            .into_iter()
            .filter(|(_, s)| *s >= min_support)
            .map(|(label, support)| VocabEntry { label, support })
            .collect();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.label.clone(), i))
            .collect();
        Ok(LabelVocabulary {
            kind,
            entries,
            min_support,
            index,
        })
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn min_support(&self) -> usize {
        self.min_support
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self, label: &IcdCode) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &IcdCode {
        &self.entries[i].label
    }

    pub fn labels(&self) -> impl Iterator<Item = &IcdCode> {
        self.entries.iter().map(|e| &e.label)
    }

    /// Indices of the vocabulary labels carried by an episode's codes.
    pub fn indices_for<'a>(&'a self, codes: &'a [IcdCode]) -> impl Iterator<Item = usize> + 'a {
        codes
            .iter()
            .filter_map(move |c| self.index(&self.kind.label_for(c)))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), IcdError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["label", "kind", "support", "index"])?;
        for (i, e) in self.entries.iter().enumerate() {
            wtr.write_record([
                e.label.as_str(),
                self.kind.as_str(),
                &e.support.to_string(),
                &i.to_string(),
            ])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a vocabulary CSV. `min_support` is not stored in the file, so
    /// the smallest support present (or 1 when empty) is used.
    pub fn read_csv<R: Read>(r: R, kind: LabelKind) -> Result<Self, IcdError> {
        #[derive(Deserialize)]
        struct Row {
            label: IcdCode,
            kind: String,
            support: usize,
            index: usize,
        }
        let mut rdr = csv::Reader::from_reader(r);
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row?;
            if row.index != i {
                return Err(IcdError::BadVocabulary(format!(
                    "row {i} has index {}",
                    row.index
                )));
            }
            if row.kind.parse::<LabelKind>().ok() != Some(kind) {
                return Err(IcdError::BadVocabulary(format!(
                    "expected kind {kind}, found {}",
                    row.kind
                )));
            }
            entries.push(VocabEntry {
                label: row.label,
                support: row.support,
            });
        }
        let min_support = entries.iter().map(|e| e.support).min().unwrap_or(1).max(1);
        let vocab = LabelVocabulary::from_entries(kind, entries.clone(), min_support)?;
        if vocab.entries != entries {
            return Err(IcdError::BadVocabulary("rows are not sorted by label".into()));
        }
        Ok(vocab)
    }
}

/// Counts, per label of `kind`, the distinct ECGs linked to an episode
/// carrying it, and keeps labels with at least `min_support` ECGs.
pub fn build_vocabulary(
    episodes: &[Episode],
    links: &[Link],
    kind: LabelKind,
    min_support: usize,
) -> Result<LabelVocabulary, IcdError> {
    if min_support == 0 {
        return Err(IcdError::InvalidMinSupport);
    }
    let by_id: HashMap<EpisodeId, &Episode> = episodes.iter().map(|e| (e.episode_id, e)).collect();
    let mut ecgs_per_label: BTreeMap<IcdCode, BTreeSet<EcgId>> = BTreeMap::new();
    for link in links {
        let episode = by_id.get(&link.episode_id).ok_or(IcdError::DanglingLink {
            ecg: link.ecg_id,
            episode: link.episode_id,
        })?;
        for code in &episode.codes {
            ecgs_per_label
                .entry(kind.label_for(code))
                .or_default()
                .insert(link.ecg_id);
        }
    }
    LabelVocabulary::from_entries(
        kind,
        ecgs_per_label.into_iter().map(|(label, ecgs)| VocabEntry {
            label,
            support: ecgs.len(),
        }),
        min_support,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{EpisodeKind, PatientId};
    use proptest::prelude::*;

    fn code(s: &str) -> IcdCode {
        IcdCode::parse(s).unwrap()
    }

    fn episode(id: u64, codes: &[&str]) -> Episode {
        Episode {
            episode_id: EpisodeId(id),
            patient_id: PatientId(id),
            kind: EpisodeKind::Hospitalization,
            start_time: 0,
            end_time: 10,
            codes: codes.iter().map(|c| code(c)).collect(),
        }
    }

    fn link(ecg: u64, ep: u64) -> Link {
        Link {
            ecg_id: EcgId(ecg),
            episode_id: EpisodeId(ep),
        }
    }

    #[test]
    fn parse_examples() {
        assert_eq!(code("I214").as_str(), "I214");
        assert_eq!(code("i21").as_str(), "I21");
        assert_eq!(code("  e1152 ").as_str(), "E1152");
        for bad in ["I2", "I2140000", "121", "I2.1", "", "Ä21"] {
            assert!(
                matches!(IcdCode::parse(bad), Err(IcdError::MalformedCode { .. })),
                "{bad:?} should be rejected"
            );
        }
    }

    #[test]
    fn category_and_chapter() {
        assert_eq!(category_of(&code("I214")), code("I21"));
        assert_eq!(category_of(&code("I21")), code("I21"));
        assert_eq!(category_of(&code("E1152")), code("E11"));
        assert_eq!(chapter_of(&code("I21")), "I");
        assert_eq!(chapter_of(&code("F32")), "F");
        assert_eq!(chapter_of(&code("Z515")), "Z");
    }

    fn three_ecg_fixture() -> (Vec<Episode>, Vec<Link>) {
        let episodes = vec![
            episode(1, &["I214"]),
            episode(2, &["I214", "I255"]),
            episode(3, &["I219"]),
        ];
        let links = vec![link(10, 1), link(11, 2), link(12, 3)];
        (episodes, links)
    }

    #[test]
    fn vocabulary_by_category() {
        let (episodes, links) = three_ecg_fixture();
        let v = build_vocabulary(&episodes, &links, LabelKind::Category, 3).unwrap();
        assert_eq!(
            v.entries(),
            &[VocabEntry {
                label: code("I21"),
                support: 3
            }]
        );
        let v1 = build_vocabulary(&episodes, &links, LabelKind::Category, 1).unwrap();
        assert_eq!(v1.index(&code("I25")), Some(1));
        assert_eq!(v1.entries()[1].support, 1);
    }

    #[test]
    fn vocabulary_by_full_code() {
        let (episodes, links) = three_ecg_fixture();
        let v = build_vocabulary(&episodes, &links, LabelKind::FullCode, 2).unwrap();
        assert_eq!(
            v.entries(),
            &[VocabEntry {
                label: code("I214"),
                support: 2
            }]
        );
        let v3 = build_vocabulary(&episodes, &links, LabelKind::FullCode, 3).unwrap();
        assert!(v3.is_empty());
        let empty = build_vocabulary(&episodes, &[], LabelKind::FullCode, 1).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn ecg_counted_once_across_episodes() {
        let episodes = vec![episode(1, &["I214"]), episode(2, &["I214"])];
        let links = vec![link(10, 1), link(10, 2)];
        let v = build_vocabulary(&episodes, &links, LabelKind::FullCode, 1).unwrap();
        assert_eq!(v.entries()[0].support, 1);
    }

    #[test]
    fn dangling_link_is_an_error() {
        let episodes = vec![episode(1, &["I214"])];
        let err = build_vocabulary(&episodes, &[link(10, 99)], LabelKind::FullCode, 1).unwrap_err();
        assert!(matches!(err, IcdError::DanglingLink { .. }));
        assert!(matches!(
            build_vocabulary(&episodes, &[], LabelKind::FullCode, 0),
            Err(IcdError::InvalidMinSupport)
        ));
    }

    #[test]
    fn vocabulary_csv_round_trip() {
        let (episodes, links) = three_ecg_fixture();
        let v = build_vocabulary(&episodes, &links, LabelKind::FullCode, 1).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,kind,support,index\nI214,code,2,0\n"));
        let back = LabelVocabulary::read_csv(&buf[..], LabelKind::FullCode).unwrap();
        assert_eq!(back.entries(), v.entries());
        assert!(LabelVocabulary::read_csv(&buf[..], LabelKind::Category).is_err());
    }

    fn arb_code() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z0-9]{2,6}"
    }

    proptest! {
        #[test]
        fn parse_is_idempotent(raw in arb_code()) {
            let once = IcdCode::parse(&raw).unwrap();
            let twice = IcdCode::parse(once.as_str()).unwrap();
            prop_assert_eq!(&once, &twice);
            let cat = once.category();
            prop_assert_eq!(cat.as_str().len(), 3);
            prop_assert_eq!(cat.category(), cat.clone());
            prop_assert!(IcdCode::parse(cat.as_str()).is_ok());
        }

        #[test]
        fn category_support_dominates_codes(
            eps in prop::collection::vec(prop::collection::vec("[A-C][0-2][0-2][0-9]?", 1..4), 1..8),
            raw_links in prop::collection::vec((0u64..12, 0usize..8), 0..30),
        ) {
            let episodes: Vec<Episode> = eps.iter().enumerate().map(|(i, cs)| {
                let refs: Vec<&str> = cs.iter().map(String::as_str).collect();
                episode(i as u64, &refs)
            }).collect();
            let links: Vec<Link> = raw_links.iter()
                .map(|&(ecg, ep)| link(ecg, (ep % episodes.len()) as u64))
                .collect();
            let codes = build_vocabulary(&episodes, &links, LabelKind::FullCode, 1).unwrap();
            let cats = build_vocabulary(&episodes, &links, LabelKind::Category, 1).unwrap();
            for e in codes.entries() {
                let ci = cats.index(&e.label.category()).unwrap();
                prop_assert!(cats.entries()[ci].support >= e.support);
            }
            for (i, label) in cats.labels().enumerate() {
                prop_assert_eq!(cats.index(label), Some(i));
            }
            prop_assert!(cats.entries().windows(2).all(|w| w[0].label < w[1].label));
        }
    }
}
