//! Command-line orchestration of the screening protocol.
//!
//! Every subcommand reads artifacts from and writes artifacts to one output
//! directory. `manifest.json` records, per stage, the config digest and the
//! sha256 of every input and output; a stage whose record still matches is
//! skipped unless `--force` is given. A lock file keeps a second process
//! out of the same directory.
//!
//! Layout under `--out`:
//!
//! ```text
//! data/{ecgs.ecgb,episodes.csv,metadata.csv}     synth
//! link/{links.csv,summary.json}                   link
//! labels/vocab_<kind>.csv                         labels
//! split/split.json                                split
//! stage{1,2}/<kind>/{model.ecgn,loss_curve.csv,train_rows.csv}      train
//! stage{1,2}/<kind>/{metrics.csv,predictions.csv,eval_rows.csv}     eval
//! select/selected_<kind>.json                     select
//! replicate/replicated_<kind>.json                replicate
//! report/{report.json,report.csv}                 report
//! ```
//!
//! Stage 1 trains on internal-train patients, early-stops on internal-val
//! first-ECG rows and evaluates there. Stage 2 retrains on all internal
//! patients for stage 1's best epoch count and evaluates on external
//! first-ECG rows.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{
    apply_exclusions, build_label_matrix, exclusion_reason, first_ecg_per_episode, link_ecgs, read_episodes_csv,
    read_links_csv, read_metadata_csv, split_patients, write_links_csv, CohortSplit, EcgId, EcgMeta, Episode,
    EpisodeId, Link, Partition, PatientId,
};
use crate::icd::{build_vocabulary, LabelKind, LabelVocabulary};
use crate::metrics::{evaluate_labels, read_metrics_csv, write_metrics_csv, LabelMetrics};
use crate::model::{
    predict, train, Checkpoint, CheckpointMeta, Examples, ModelConfig, ModelError, Network, TrainConfig,
};
use crate::screen::{build_report, emit_report, replicate, select_labels, SelectedLabel, SelectionRule};
use crate::signal::{fit_normalization, normalize, read_container, EcgTrace, N_LEADS};
use crate::synthgen::{synth_cohort, SynthConfig};

pub const DESK_PRESET: &str = include_str!("../configs/desk-scale.json");
pub const PAPER_PRESET: &str = include_str!("../configs/paper-scale.json");
pub const THREADS_ENV: &str = "ECGSCREEN_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn model_err(path: &Path, e: ModelError) -> CliError {
    match e {
        ModelError::ConfigInvalid(m) => CliError::Config(m),
        ModelError::Io(_) | ModelError::Autodiff(_) => io_err(path, e),
        other => data_err(path, other),
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub container: PathBuf,
    pub episodes: PathBuf,
    pub metadata: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub external_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

/// Everything a run depends on. Its canonical JSON digest tags every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    /// Existing dataset; when absent the `synth` block generates one under `data/`.
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub kinds: Vec<LabelKind>,
    pub min_support: usize,
    pub split: SplitConfig,
    /// `n_labels` is taken from the label vocabulary at train time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub selection: SelectionRule,
    pub eval_batch_size: usize,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let text = match name {
            "desk-scale" => DESK_PRESET,
            "paper-scale" => PAPER_PRESET,
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset {other:?} (available: desk-scale, paper-scale)"
                )))
            }
        };
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// One seed drives the synthetic cohort, the split and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.split.seed = seed;
        self.train.seed = seed;
        if let Some(s) = &mut self.synth {
            s.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| Err(CliError::Config(m));
        if self.kinds.is_empty() {
            return cfg("kinds must name at least one label kind".into());
        }
        if self.min_support == 0 {
            return cfg("min_support must be at least 1".into());
        }
        for (name, v) in [("split.external_frac", self.split.external_frac), ("split.val_frac", self.split.val_frac)] {
            if !(v > 0.0 && v < 1.0) {
                return cfg(format!("{name} must be in (0, 1), got {v}"));
            }
        }
        if self.eval_batch_size == 0 {
            return cfg("eval_batch_size must be at least 1".into());
        }
        let mut m = self.model.clone();
        m.n_labels = 1;
        m.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        if m.input_leads != N_LEADS {
            return cfg(format!("model.input_leads must be {N_LEADS}"));
        }
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.selection
            .validate()
            .map_err(|e| CliError::Config(format!("selection: {e}")))?;
        match (&self.data, &self.synth) {
            (None, None) => return cfg("either data or synth must be given".into()),
            (None, Some(s)) => {
                s.validate().map_err(|e| CliError::Config(format!("synth: {e}")))?;
                if s.samples_per_lead() != self.model.input_len {
                    return cfg(format!(
                        "model.input_len {} does not match synth geometry ({} samples)",
                        self.model.input_len,
                        s.samples_per_lead()
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_bytes(&serde_json::to_vec(self).expect("config serializes"))
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(h.finalize()))
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Code,
    Category,
    Both,
}

impl KindArg {
    fn kinds(self) -> Vec<LabelKind> {
        match self {
            KindArg::Code => vec![LabelKind::FullCode],
            KindArg::Category => vec![LabelKind::Category],
            KindArg::Both => LabelKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ecgscreen", version, about = "ICD-wide ECG screening pipeline")]
pub struct Args {
    /// JSON run config; defaults to the desk-scale preset.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Bundled config: desk-scale or paper-scale.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub kind: Option<KindArg>,
    /// Overrides the synth, split and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Re-run stages even when the manifest says they are current.
    #[arg(long, global = true)]
    pub force: bool,
    /// Protocol stage for train/eval: 1 = internal, 2 = external.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: Option<u8>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort into data/.
    Synth,
    /// Apply exclusions and link ECGs to episodes.
    Link,
    /// Build label vocabularies.
    Labels,
    /// Patient-level external/internal-train/internal-val split.
    Split,
    /// Train the network for one stage.
    Train,
    /// Evaluate a trained stage on its first-ECG rows.
    Eval,
    /// Apply the selection rule to stage-1 metrics.
    Select,
    /// Check selected labels against stage-2 external metrics.
    Replicate,
    /// Write the grouped report.
    Report,
    /// Run every stage in order.
    Pipeline,
}

// ---------------------------------------------------------------------------
// Manifest and locking

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".ecgscreen.lock";

struct OutLock(PathBuf);

impl OutLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "{} is locked by another run; remove {} if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, producer: &str) -> Result<T, CliError> {
    let text = read_artifact(path, producer)?;
    serde_json::from_str(&text).map_err(|e| data_err(path, e))
}

fn read_artifact(path: &Path, producer: &str) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "missing artifact {}; run `{producer}` first",
            path.display()
        )));
    }
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn open_artifact(path: &Path, producer: &str) -> Result<BufReader<File>, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "missing artifact {}; run `{producer}` first",
            path.display()
        )));
    }
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Artifacts with embedded digests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSummary {
    pub config_digest: String,
    pub n_ecgs: usize,
    pub excluded: BTreeMap<String, usize>,
    pub n_kept: usize,
    pub n_links: usize,
    pub n_unlinked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub config_digest: String,
    #[serde(flatten)]
    pub split: CohortSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionArtifact {
    pub config_digest: String,
    pub kind: LabelKind,
    pub rule: SelectionRule,
    pub labels: Vec<SelectedLabel>,
}

/// One audited evaluation row: the ECG and the episode it is first in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRow {
    pub ecg_id: EcgId,
    pub episode_id: EpisodeId,
    pub patient_id: PatientId,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRow {
    pub ecg_id: EcgId,
    pub patient_id: PatientId,
}

pub fn read_eval_rows(path: &Path) -> Result<Vec<EvalRow>, CliError> {
    let mut r = csv::Reader::from_reader(open_artifact(path, "eval")?);
    r.deserialize().collect::<Result<_, _>>().map_err(|e| data_err(path, e))
}

pub fn read_train_rows(path: &Path) -> Result<Vec<TrainRow>, CliError> {
    let mut r = csv::Reader::from_reader(open_artifact(path, "train")?);
    r.deserialize().collect::<Result<_, _>>().map_err(|e| data_err(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Loaded dataset

struct Dataset {
    metas: Vec<EcgMeta>,
    episodes: Vec<Episode>,
    links: Vec<Link>,
    traces: HashMap<EcgId, EcgTrace>,
    patient_of: HashMap<EcgId, PatientId>,
}

impl Dataset {
    fn trace(&self, id: EcgId) -> Result<&EcgTrace, CliError> {
        self.traces
            .get(&id)
            .ok_or_else(|| CliError::Data(format!("ECG {id} is linked but missing from the container")))
    }

    /// All linked ECGs of the given patients, ascending.
    fn all_rows(&self, patients: &BTreeSet<PatientId>) -> Vec<EcgId> {
        let ids: BTreeSet<EcgId> = self
            .links
            .iter()
            .map(|l| l.ecg_id)
            .filter(|id| patients.contains(&self.patient_of[id]))
            .collect();
        ids.into_iter().collect()
    }

    /// First ECG of every episode of the given patients.
    fn first_rows(&self, split: &CohortSplit, patients: &BTreeSet<PatientId>) -> Vec<EvalRow> {
        let mut rows: Vec<EvalRow> = first_ecg_per_episode(&self.links, &self.metas)
            .into_iter()
            .filter_map(|(episode_id, ecg_id)| {
                let patient_id = self.patient_of[&ecg_id];
                patients.contains(&patient_id).then(|| EvalRow {
                    ecg_id,
                    episode_id,
                    patient_id,
                    partition: split.partition_of(patient_id).expect("patient is in the split"),
                })
            })
            .collect();
        rows.sort_by_key(|r| (r.ecg_id, r.episode_id));
        rows
    }
}

fn unique_ecgs(rows: &[EvalRow]) -> Vec<EcgId> {
    let ids: BTreeSet<EcgId> = rows.iter().map(|r| r.ecg_id).collect();
    ids.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Run context

pub struct Context {
    pub cfg: RunConfig,
    pub digest: String,
    pub out: PathBuf,
    pub force: bool,
    manifest: RefCell<Manifest>,
    dataset: RefCell<Option<Rc<Dataset>>>,
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf, force: bool) -> Result<Self, CliError> {
        cfg.validate()?;
        let digest = cfg.digest();
        let manifest_path = out.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            read_json(&manifest_path, "any stage")?
        } else {
            Manifest::default()
        };
        Ok(Context {
            cfg,
            digest,
            out,
            force,
            manifest: RefCell::new(manifest),
            dataset: RefCell::new(None),
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    pub fn data_paths(&self) -> DataPaths {
        self.cfg.data.clone().unwrap_or_else(|| DataPaths {
            container: self.path("data/ecgs.ecgb"),
            episodes: self.path("data/episodes.csv"),
            metadata: self.path("data/metadata.csv"),
        })
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn digests(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
        paths.iter().map(|p| Ok((self.rel(p), sha256_file(p)?))).collect()
    }

    /// Runs `body` unless the manifest shows identical config, inputs and
    /// outputs. Returns whether the stage ran.
    fn stage(
        &self,
        name: &str,
        producers: &[(&Path, &str)],
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<(), CliError>,
    ) -> Result<bool, CliError> {
        for (p, producer) in producers {
            if !p.exists() {
                return Err(CliError::Data(format!(
                    "missing artifact {}; run `{producer}` first",
                    p.display()
                )));
            }
        }
        let inputs: Vec<PathBuf> = producers.iter().map(|(p, _)| p.to_path_buf()).collect();
        let input_digests = self.digests(&inputs)?;
        if !self.force {
            let m = self.manifest.borrow();
            if let Some(rec) = m.stages.get(name) {
                let current = rec.config_digest == self.digest
                    && rec.inputs == input_digests
                    && outputs.iter().all(|o| o.exists())
                    && self.digests(outputs).is_ok_and(|d| d == rec.outputs);
                if current {
                    log::info!("{name}: up to date");
                    return Ok(false);
                }
            }
        }
        log::info!("{name}: running");
        body()?;
        let rec = StageRecord {
            config_digest: self.digest.clone(),
            inputs: input_digests,
            outputs: self.digests(outputs)?,
        };
        let mut m = self.manifest.borrow_mut();
        m.config_digest = self.digest.clone();
        m.stages.insert(name.to_string(), rec);
        write_json(&self.path(MANIFEST_FILE), &*m)?;
        Ok(true)
    }

    fn vocab_path(&self, kind: LabelKind) -> PathBuf {
        self.path(format!("labels/vocab_{}.csv", kind.as_str()))
    }

    fn stage_dir(&self, stage: u8, kind: LabelKind) -> PathBuf {
        self.path(format!("stage{stage}/{}", kind.as_str()))
    }

    fn dataset(&self) -> Result<Rc<Dataset>, CliError> {
        if let Some(d) = self.dataset.borrow().as_ref() {
            return Ok(d.clone());
        }
        let paths = self.data_paths();
        let metas = read_metadata_csv(open_artifact(&paths.metadata, "synth")?).map_err(|e| data_err(&paths.metadata, e))?;
        let episodes =
            read_episodes_csv(open_artifact(&paths.episodes, "synth")?).map_err(|e| data_err(&paths.episodes, e))?;
        let links_path = self.path("link/links.csv");
        let links = read_links_csv(open_artifact(&links_path, "link")?).map_err(|e| data_err(&links_path, e))?;
        let traces = read_container(&paths.container).map_err(|e| data_err(&paths.container, e))?;
        let linked: BTreeSet<EcgId> = links.iter().map(|l| l.ecg_id).collect();
        let mut by_id = HashMap::with_capacity(linked.len());
        for t in traces {
            if linked.contains(&t.meta.ecg_id) {
                if t.samples_per_lead() != self.cfg.model.input_len {
                    return Err(data_err(
                        &paths.container,
                        format!(
                            "ECG {} has {} samples per lead, model expects {}",
                            t.meta.ecg_id,
                            t.samples_per_lead(),
                            self.cfg.model.input_len
                        ),
                    ));
                }
                by_id.insert(t.meta.ecg_id, t);
            }
        }
        let patient_of: HashMap<EcgId, PatientId> = metas.iter().map(|m| (m.ecg_id, m.patient_id)).collect();
        for id in &linked {
            if !patient_of.contains_key(id) {
                return Err(data_err(&links_path, format!("ECG {id} is not in the metadata")));
            }
        }
        let d = Rc::new(Dataset {
            metas,
            episodes,
            links,
            traces: by_id,
            patient_of,
        });
        *self.dataset.borrow_mut() = Some(d.clone());
        Ok(d)
    }

    fn vocabulary(&self, kind: LabelKind) -> Result<LabelVocabulary, CliError> {
        let p = self.vocab_path(kind);
        LabelVocabulary::read_csv(open_artifact(&p, "labels")?, kind).map_err(|e| data_err(&p, e))
    }

    fn split(&self) -> Result<CohortSplit, CliError> {
        let p = self.path("split/split.json");
        let art: SplitArtifact = read_json(&p, "split")?;
        let text = serde_json::to_string(&art.split).map_err(|e| data_err(&p, e))?;
        CohortSplit::from_json(&text).map_err(|e| data_err(&p, e))
    }

    // -----------------------------------------------------------------------
    // Stages

    pub fn synth(&self) -> Result<bool, CliError> {
        let Some(synth) = self.cfg.synth.clone() else {
            return Err(CliError::Config("synth: config has no synth block".into()));
        };
        if self.cfg.data.is_some() {
            return Err(CliError::Config("synth: config points at an existing dataset".into()));
        }
        let paths = self.data_paths();
        let outputs = vec![paths.container.clone(), paths.episodes.clone(), paths.metadata.clone()];
        self.stage("synth", &[], &outputs, || {
            let cohort = synth_cohort(&synth).map_err(|e| CliError::Config(e.to_string()))?;
            cohort
                .write(&self.path("data"))
                .map_err(|e| io_err(&self.path("data"), e))?;
            *self.dataset.borrow_mut() = None;
            Ok(())
        })
    }

    pub fn link(&self) -> Result<bool, CliError> {
        let paths = self.data_paths();
        let outputs = vec![self.path("link/links.csv"), self.path("link/summary.json")];
        self.stage(
            "link",
            &[(&paths.metadata, "synth"), (&paths.episodes, "synth")],
            &outputs,
            || {
                let metas = read_metadata_csv(open_artifact(&paths.metadata, "synth")?)
                    .map_err(|e| data_err(&paths.metadata, e))?;
                let episodes = read_episodes_csv(open_artifact(&paths.episodes, "synth")?)
                    .map_err(|e| data_err(&paths.episodes, e))?;
                let mut excluded = BTreeMap::new();
                for m in &metas {
                    if let Some(r) = exclusion_reason(m) {
                        *excluded.entry(format!("{r:?}")).or_insert(0) += 1;
                    }
                }
                let kept = apply_exclusions(&metas);
                let linkage = link_ecgs(&kept, &episodes);
                write_links_csv(create(&outputs[0])?, &linkage.links).map_err(|e| io_err(&outputs[0], e))?;
                let summary = LinkSummary {
                    config_digest: self.digest.clone(),
                    n_ecgs: metas.len(),
                    excluded,
                    n_kept: kept.len(),
                    n_links: linkage.links.len(),
                    n_unlinked: linkage.unlinked_ecgs,
                };
                write_json(&outputs[1], &summary)?;
                *self.dataset.borrow_mut() = None;
                Ok(())
            },
        )
    }

    pub fn labels(&self, kind: LabelKind) -> Result<bool, CliError> {
        let paths = self.data_paths();
        let links = self.path("link/links.csv");
        let out = self.vocab_path(kind);
        self.stage(
            &format!("labels/{}", kind.as_str()),
            &[(&paths.episodes, "synth"), (&links, "link")],
            std::slice::from_ref(&out),
            || {
                let episodes = read_episodes_csv(open_artifact(&paths.episodes, "synth")?)
                    .map_err(|e| data_err(&paths.episodes, e))?;
                let links = read_links_csv(open_artifact(&links, "link")?).map_err(|e| data_err(&links, e))?;
                let vocab = build_vocabulary(&episodes, &links, kind, self.cfg.min_support)
                    .map_err(|e| data_err(&paths.episodes, e))?;
                if vocab.is_empty() {
                    return Err(CliError::Data(format!(
                        "no {} label reaches min_support {}",
                        kind.as_str(),
                        self.cfg.min_support
                    )));
                }
                log::info!("{} {} labels", vocab.len(), kind.as_str());
                vocab.write_csv(create(&out)?).map_err(|e| io_err(&out, e))
            },
        )
    }

    pub fn split_stage(&self) -> Result<bool, CliError> {
        let links = self.path("link/links.csv");
        let paths = self.data_paths();
        let out = self.path("split/split.json");
        self.stage(
            "split",
            &[(&links, "link"), (&paths.metadata, "synth")],
            std::slice::from_ref(&out),
            || {
                let metas = read_metadata_csv(open_artifact(&paths.metadata, "synth")?)
                    .map_err(|e| data_err(&paths.metadata, e))?;
                let links = read_links_csv(open_artifact(&links, "link")?).map_err(|e| data_err(&links, e))?;
                let patient_of: HashMap<EcgId, PatientId> = metas.iter().map(|m| (m.ecg_id, m.patient_id)).collect();
                let patients: BTreeSet<PatientId> = links
                    .iter()
                    .filter_map(|l| patient_of.get(&l.ecg_id).copied())
                    .collect();
                let s = &self.cfg.split;
                let split = split_patients(&patients, s.external_frac, s.val_frac, s.seed)
                    .map_err(|e| CliError::Data(format!("split: {e}")))?;
                write_json(
                    &out,
                    &SplitArtifact {
                        config_digest: self.digest.clone(),
                        split,
                    },
                )
            },
        )
    }

    fn data_inputs(&self, kind: LabelKind) -> Vec<(PathBuf, &'static str)> {
        let p = self.data_paths();
        vec![
            (p.container, "synth"),
            (p.metadata, "synth"),
            (p.episodes, "synth"),
            (self.path("link/links.csv"), "link"),
            (self.vocab_path(kind), "labels"),
            (self.path("split/split.json"), "split"),
        ]
    }

    fn examples(
        &self,
        d: &Dataset,
        rows: &[EcgId],
        vocab: &LabelVocabulary,
        stats: &crate::signal::NormalizationStats,
    ) -> Result<Examples, CliError> {
        let labels = build_label_matrix(rows, &d.links, &d.episodes, vocab).map_err(|e| CliError::Data(e.to_string()))?;
        let mut ex = Examples::new(N_LEADS, self.cfg.model.input_len, vocab.len());
        for (i, &id) in rows.iter().enumerate() {
            ex.push(&normalize(d.trace(id)?, stats), labels.row(i))
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
        Ok(ex)
    }

    pub fn train_stage(&self, stage: u8, kind: LabelKind) -> Result<bool, CliError> {
        let dir = self.stage_dir(stage, kind);
        let stage1_model = self.stage_dir(1, kind).join("model.ecgn");
        let mut inputs = self.data_inputs(kind);
        if stage == 2 {
            inputs.push((stage1_model.clone(), "train --stage 1"));
        }
        let producers: Vec<(&Path, &str)> = inputs.iter().map(|(p, s)| (p.as_path(), *s)).collect();
        let outputs = vec![dir.join("model.ecgn"), dir.join("loss_curve.csv"), dir.join("train_rows.csv")];
        self.stage(&format!("train/stage{stage}/{}", kind.as_str()), &producers, &outputs, || {
            let d = self.dataset()?;
            let vocab = self.vocabulary(kind)?;
            let split = self.split()?;
            let (train_patients, val, tcfg) = if stage == 1 {
                let val_rows = unique_ecgs(&d.first_rows(&split, &split.internal_val));
                (split.internal_train.clone(), Some(val_rows), self.cfg.train.clone())
            } else {
                let s1 = Checkpoint::load(&stage1_model).map_err(|e| model_err(&stage1_model, e))?;
                let epochs = s1.meta.epoch.max(1);
                log::info!("stage 2 retrains for {epochs} epochs");
                let tcfg = TrainConfig {
                    max_epochs: epochs,
                    ..self.cfg.train.clone()
                };
                (split.internal(), None, tcfg)
            };
            let train_ids = d.all_rows(&train_patients);
            if train_ids.is_empty() {
                return Err(CliError::Data("no training rows".into()));
            }
            let traces: Vec<&EcgTrace> = train_ids.iter().map(|&id| d.trace(id)).collect::<Result<_, _>>()?;
            let stats = fit_normalization(&traces).map_err(|e| CliError::Data(e.to_string()))?;
            drop(traces);
            let train_ex = self.examples(&d, &train_ids, &vocab, &stats)?;
            let val_ex = match &val {
                Some(ids) => Some(self.examples(&d, ids, &vocab, &stats)?),
                None => None,
            };
            log::info!(
                "stage {stage} {}: {} training rows, {} validation rows, {} labels",
                kind.as_str(),
                train_ex.len(),
                val_ex.as_ref().map_or(0, Examples::len),
                vocab.len()
            );
            let model_cfg = ModelConfig {
                n_labels: vocab.len(),
                ..self.cfg.model.clone()
            };
            let mut net: Network<f32> = Network::new(&model_cfg, tcfg.seed).map_err(|e| model_err(&dir, e))?;
            let outcome = train(&mut net, &train_ex, val_ex.as_ref(), &tcfg).map_err(|e| model_err(&dir, e))?;

            let ckpt = Checkpoint {
                stats,
                meta: CheckpointMeta {
                    epoch: outcome.best_epoch,
                    seed: tcfg.seed,
                    loss_history: outcome.curve.clone(),
                    labels: vocab.labels().map(|l| l.to_string()).collect(),
                    label_kind: Some(kind.as_str().to_string()),
                    config_digest: self.digest.clone(),
                },
                network: net,
                adam: Some(outcome.adam),
            };
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            ckpt.save(&outputs[0]).map_err(|e| model_err(&outputs[0], e))?;
            let mut w = create(&outputs[1])?;
            let curve_io = |e| io_err(&outputs[1], e);
            writeln!(w, "epoch,train_loss,val_loss").map_err(curve_io)?;
            for r in &outcome.curve {
                let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
                writeln!(w, "{},{},{}", r.epoch, r.train_loss, val).map_err(curve_io)?;
            }
            w.flush().map_err(curve_io)?;
            let rows: Vec<TrainRow> = train_ids
                .iter()
                .map(|&ecg_id| TrainRow {
                    ecg_id,
                    patient_id: d.patient_of[&ecg_id],
                })
                .collect();
            write_rows(&outputs[2], &rows)
        })
    }

    pub fn eval_stage(&self, stage: u8, kind: LabelKind) -> Result<bool, CliError> {
        let dir = self.stage_dir(stage, kind);
        let model_path = dir.join("model.ecgn");
        let mut inputs = self.data_inputs(kind);
        inputs.push((model_path.clone(), if stage == 1 { "train --stage 1" } else { "train --stage 2" }));
        let producers: Vec<(&Path, &str)> = inputs.iter().map(|(p, s)| (p.as_path(), *s)).collect();
        let outputs = vec![dir.join("metrics.csv"), dir.join("predictions.csv"), dir.join("eval_rows.csv")];
        self.stage(&format!("eval/stage{stage}/{}", kind.as_str()), &producers, &outputs, || {
            let d = self.dataset()?;
            let vocab = self.vocabulary(kind)?;
            let split = self.split()?;
            let ckpt = Checkpoint::load(&model_path).map_err(|e| model_err(&model_path, e))?;
            ckpt.expect_labels(vocab.len()).map_err(|e| model_err(&model_path, e))?;
            let vocab_labels: Vec<String> = vocab.labels().map(|l| l.to_string()).collect();
            if ckpt.meta.labels != vocab_labels {
                return Err(data_err(&model_path, "checkpoint labels differ from the vocabulary"));
            }
            let patients = if stage == 1 { &split.internal_val } else { &split.external };
            let audit = d.first_rows(&split, patients);
            let rows = unique_ecgs(&audit);
            let ex = self.examples(&d, &rows, &vocab, &ckpt.stats)?;
            let probs = predict(&ckpt.network, &ex, self.cfg.eval_batch_size).map_err(|e| model_err(&model_path, e))?;
            let labels = build_label_matrix(&rows, &d.links, &d.episodes, &vocab).map_err(|e| CliError::Data(e.to_string()))?;
            let metrics = evaluate_labels(&probs, &labels).map_err(|e| CliError::Runtime(e.to_string()))?;
            write_metrics_csv(create(&outputs[0])?, &metrics).map_err(|e| io_err(&outputs[0], e))?;

            let mut w = create(&outputs[1])?;
            let pio = |e| io_err(&outputs[1], e);
            writeln!(w, "ecg_id,{}", vocab_labels.join(",")).map_err(pio)?;
            let l = vocab.len();
            for (i, id) in rows.iter().enumerate() {
                let vals: Vec<String> = probs[i * l..(i + 1) * l].iter().map(|p| p.to_string()).collect();
                writeln!(w, "{id},{}", vals.join(",")).map_err(pio)?;
            }
            w.flush().map_err(pio)?;
            write_rows(&outputs[2], &audit)
        })
    }

    pub fn select(&self, kind: LabelKind) -> Result<bool, CliError> {
        let metrics_path = self.stage_dir(1, kind).join("metrics.csv");
        let out = self.path(format!("select/selected_{}.json", kind.as_str()));
        self.stage(
            &format!("select/{}", kind.as_str()),
            &[(&metrics_path, "eval --stage 1")],
            std::slice::from_ref(&out),
            || {
                let metrics = read_metrics(&metrics_path, "eval --stage 1")?;
                let labels = select_labels(&metrics, &self.cfg.selection);
                log::info!("{} of {} {} labels selected", labels.len(), metrics.len(), kind.as_str());
                write_json(
                    &out,
                    &SelectionArtifact {
                        config_digest: self.digest.clone(),
                        kind,
                        rule: self.cfg.selection.clone(),
                        labels,
                    },
                )
            },
        )
    }

    pub fn replicate_stage(&self, kind: LabelKind) -> Result<bool, CliError> {
        let selected = self.path(format!("select/selected_{}.json", kind.as_str()));
        let metrics_path = self.stage_dir(2, kind).join("metrics.csv");
        let out = self.path(format!("replicate/replicated_{}.json", kind.as_str()));
        self.stage(
            &format!("replicate/{}", kind.as_str()),
            &[(&selected, "select"), (&metrics_path, "eval --stage 2")],
            std::slice::from_ref(&out),
            || {
                let sel: SelectionArtifact = read_json(&selected, "select")?;
                let metrics = read_metrics(&metrics_path, "eval --stage 2")?;
                let labels = replicate(&sel.labels, &metrics, &sel.rule).map_err(|e| data_err(&metrics_path, e))?;
                write_json(
                    &out,
                    &SelectionArtifact {
                        config_digest: self.digest.clone(),
                        kind,
                        rule: sel.rule,
                        labels,
                    },
                )
            },
        )
    }

    pub fn report(&self) -> Result<bool, CliError> {
        let inputs: Vec<(PathBuf, &str)> = self
            .cfg
            .kinds
            .iter()
            .map(|k| (self.path(format!("replicate/replicated_{}.json", k.as_str())), "replicate"))
            .collect();
        let producers: Vec<(&Path, &str)> = inputs.iter().map(|(p, s)| (p.as_path(), *s)).collect();
        let outputs = vec![self.path("report/report.json"), self.path("report/report.csv")];
        self.stage("report", &producers, &outputs, || {
            let mut by_kind = Vec::new();
            let mut digests = BTreeSet::new();
            for (p, _) in &inputs {
                let art: SelectionArtifact = read_json(p, "replicate")?;
                digests.insert(art.config_digest.clone());
                by_kind.push((art.kind, art.labels));
            }
            if digests.len() > 1 {
                return Err(CliError::Data(format!(
                    "report inputs come from different configs ({} digests); rerun with --force",
                    digests.len()
                )));
            }
            let paths = self.data_paths();
            let mut metadata = BTreeMap::new();
            metadata.insert("config_digest".into(), self.digest.clone().into());
            metadata.insert("preset".into(), self.cfg.preset.clone().into());
            metadata.insert("split_seed".into(), self.cfg.split.seed.into());
            metadata.insert("train_seed".into(), self.cfg.train.seed.into());
            for (name, p) in [
                ("container_sha256", &paths.container),
                ("episodes_sha256", &paths.episodes),
                ("metadata_sha256", &paths.metadata),
            ] {
                metadata.insert(name.into(), sha256_file(p)?.into());
            }
            let report = build_report(&by_kind, &self.cfg.selection, metadata);
            let dir = self.path("report");
            emit_report(&report, &dir).map_err(|e| io_err(&dir, e))
        })
    }

    pub fn pipeline(&self) -> Result<(), CliError> {
        if self.cfg.data.is_none() {
            self.synth()?;
        }
        self.link()?;
        for &k in &self.cfg.kinds {
            self.labels(k)?;
        }
        self.split_stage()?;
        for &k in &self.cfg.kinds {
            self.train_stage(1, k)?;
            self.eval_stage(1, k)?;
            self.select(k)?;
            self.train_stage(2, k)?;
            self.eval_stage(2, k)?;
            self.replicate_stage(k)?;
        }
        self.report()?;
        Ok(())
    }
}

fn read_metrics(path: &Path, producer: &str) -> Result<Vec<LabelMetrics>, CliError> {
    read_metrics_csv(open_artifact(path, producer)?).map_err(|e| data_err(path, e))
}

// ---------------------------------------------------------------------------
// Entry points

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Resolves config, overrides and the output directory for parsed arguments.
pub fn context_for(args: &Args) -> Result<Context, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::preset("desk-scale")?,
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(k) = args.kind {
        cfg.kinds = k.kinds();
    }
    let out = args
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    Context::new(cfg, out, args.force)
}

pub fn execute(args: &Args) -> Result<(), CliError> {
    configure_threads()?;
    let ctx = context_for(args)?;
    let _lock = OutLock::acquire(&ctx.out)?;
    let stage = || {
        args.stage
            .ok_or_else(|| CliError::Usage("--stage 1|2 is required for train and eval".into()))
    };
    let kinds = ctx.cfg.kinds.clone();
    match args.command {
        Command::Synth => {
            ctx.synth()?;
        }
        Command::Link => {
            ctx.link()?;
        }
        Command::Labels => {
            for k in kinds {
                ctx.labels(k)?;
            }
        }
        Command::Split => {
            ctx.split_stage()?;
        }
        Command::Train => {
            let s = stage()?;
            for k in kinds {
                ctx.train_stage(s, k)?;
            }
        }
        Command::Eval => {
            let s = stage()?;
            for k in kinds {
                ctx.eval_stage(s, k)?;
            }
        }
        Command::Select => {
            for k in kinds {
                ctx.select(k)?;
            }
        }
        Command::Replicate => {
            for k in kinds {
                ctx.replicate_stage(k)?;
            }
        }
        Command::Report => {
            ctx.report()?;
        }
        Command::Pipeline => ctx.pipeline()?,
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in ["desk-scale", "paper-scale"] {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.preset, name);
        }
        let desk = RunConfig::preset("desk-scale").unwrap();
        assert_eq!(desk.min_support, 50);
        assert_eq!(desk.model.input_len, 1000);
        let paper = RunConfig::preset("paper-scale").unwrap();
        assert_eq!(paper.min_support, 1000);
        assert_eq!(paper.model.input_len, 5000);
        assert_eq!(paper.train.batch_size, 512);
        assert!(matches!(RunConfig::preset("laptop"), Err(CliError::Config(_))));
    }

    #[test]
    fn seed_override_and_digest() {
        let a = RunConfig::preset("desk-scale").unwrap();
        let b = a.clone().with_seed(7);
        assert_eq!(b.split.seed, 7);
        assert_eq!(b.train.seed, 7);
        assert_eq!(b.synth.as_ref().unwrap().seed, 7);
        assert_ne!(a.digest(), b.digest());
        assert_eq!(b.digest(), b.clone().digest());
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let mut c = RunConfig::preset("desk-scale").unwrap();
        c.split.external_frac = 1.0;
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
        let mut c = RunConfig::preset("desk-scale").unwrap();
        c.model.input_len = 999;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = RunConfig::preset("desk-scale").unwrap();
        c.synth = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["ecgscreen", "bogus"]), 1);
        assert_eq!(run(["ecgscreen", "train", "--stage", "3", "--out", "x"]), 1);
        assert_eq!(run(["ecgscreen", "split"]), 1);
    }

    #[test]
    fn lock_excludes_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutLock::acquire(dir.path()).unwrap();
        assert_eq!(OutLock::acquire(dir.path()).err().unwrap().exit_code(), 3);
        drop(lock);
        assert!(OutLock::acquire(dir.path()).is_ok());
    }
}
