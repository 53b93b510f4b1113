//! Shared oracles and pipeline helpers for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ecgscreen::autodiff::{Graph, Tensor, Var};
use ecgscreen::cli::{self, RunConfig, SelectionArtifact, SplitArtifact};
use ecgscreen::cohort::{read_links_csv, read_metadata_csv, EcgMeta, Link};
use ecgscreen::{EcgId, EpisodeId, PatientId};
use ecgscreen::metrics::{read_metrics_csv, LabelMetrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Finite differences

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Scalar loss built from graph leaves; leaves are registered as params in order.
pub trait LossFn: Fn(&mut Graph<f64>, &[Var]) -> Var {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Var> LossFn for F {}

fn eval_loss(leaves: &[Tensor<f64>], f: &impl LossFn) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let value = g.value(loss).data()[0];
    g.backward(loss).expect("backward");
    let grads = vars
        .iter()
        .map(|&v| g.take_grad(v).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();
    (value, grads)
}

fn loss_only(leaves: &[Tensor<f64>], f: &impl LossFn) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.value(loss).data()[0]
}

/// Relative error between backprop and central differences over every
/// element of every leaf.
pub fn gradcheck(leaves: &[Tensor<f64>], h: f64, f: impl LossFn) -> f64 {
    let (_, analytic) = eval_loss(leaves, &f);
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    let mut work = leaves.to_vec();
    for (li, grad) in analytic.iter().enumerate() {
        for i in 0..work[li].len() {
            let x0 = work[li].data()[i];
            work[li].data_mut()[i] = x0 + h;
            let up = loss_only(&work, &f);
            work[li].data_mut()[i] = x0 - h;
            let down = loss_only(&work, &f);
            work[li].data_mut()[i] = x0;
            n_all.push((up - down) / (2.0 * h));
            a_all.push(grad[i]);
        }
    }
    rel_err(&a_all, &n_all)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` away from zero, either sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values on a lattice of step `gap` so every max is unique by a margin.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// `Σ out ⊙ w` with a fixed random weight so every output element matters.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let w = uniform(&mut rng(seed), &shape, -1.0, 1.0);
    let wv = g.input(w);
    let p = g.mul(out, wv).unwrap();
    g.sum(p).unwrap()
}

// ---------------------------------------------------------------------------
// Metric oracles

/// Fraction of (positive, negative) pairs the positive wins; ties count ½.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Precision at each positive, where the cutoff keeps everything scoring at
/// least as high as that positive; positives visited in descending score order.
pub fn naive_average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    pos.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut total = 0.0;
    for &i in &pos {
        let kept = scores.iter().filter(|&&s| s >= scores[i]).count();
        let tp = pos.iter().filter(|&&k| scores[k] >= scores[i]).count();
        total += tp as f64 / kept as f64;
    }
    total / pos.len() as f64
}

// ---------------------------------------------------------------------------
// Pipeline runs

pub fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["ecgscreen"];
    argv.extend_from_slice(args);
    cli::run(argv)
}

pub fn run_cli_path(cmd: &str, out: &Path, extra: &[&str]) -> i32 {
    let out = out.to_string_lossy().into_owned();
    let mut args = vec![cmd, "--out", out.as_str()];
    args.extend_from_slice(extra);
    run_cli(&args)
}

/// Desk preset shrunk to a cohort and training budget that finish in seconds.
pub fn small_config(n_patients: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::preset("desk-scale").unwrap();
    cfg.preset = "desk-scale-small".into();
    cfg.synth.as_mut().unwrap().n_patients = n_patients;
    cfg.min_support = 5;
    cfg.train.max_epochs = epochs;
    cfg.train.patience = epochs;
    cfg
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

/// Artifacts of one finished run directory.
pub struct Run {
    pub dir: PathBuf,
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Run { dir: dir.into() }
    }

    pub fn split(&self) -> SplitArtifact {
        serde_json::from_str(&fs::read_to_string(self.dir.join("split/split.json")).unwrap()).unwrap()
    }

    pub fn metas(&self) -> Vec<EcgMeta> {
        read_metadata_csv(fs::File::open(self.dir.join("data/metadata.csv")).unwrap()).unwrap()
    }

    pub fn links(&self) -> Vec<Link> {
        read_links_csv(fs::File::open(self.dir.join("link/links.csv")).unwrap()).unwrap()
    }

    pub fn stage_dir(&self, stage: u8, kind: &str) -> PathBuf {
        self.dir.join(format!("stage{stage}/{kind}"))
    }

    pub fn metrics(&self, stage: u8, kind: &str) -> Vec<LabelMetrics> {
        read_metrics_csv(fs::File::open(self.stage_dir(stage, kind).join("metrics.csv")).unwrap()).unwrap()
    }

    pub fn selected(&self, kind: &str) -> SelectionArtifact {
        let p = self.dir.join(format!("select/selected_{kind}.json"));
        serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
    }

    pub fn replicated(&self, kind: &str) -> SelectionArtifact {
        let p = self.dir.join(format!("replicate/replicated_{kind}.json"));
        serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
    }

    pub fn eval_rows(&self, stage: u8, kind: &str) -> Vec<cli::EvalRow> {
        cli::read_eval_rows(&self.stage_dir(stage, kind).join("eval_rows.csv")).unwrap()
    }

    pub fn train_rows(&self, stage: u8, kind: &str) -> Vec<cli::TrainRow> {
        cli::read_train_rows(&self.stage_dir(stage, kind).join("train_rows.csv")).unwrap()
    }

    /// ECG ids in the first column of predictions.csv.
    pub fn predicted_ecgs(&self, stage: u8, kind: &str) -> Vec<EcgId> {
        let text = fs::read_to_string(self.stage_dir(stage, kind).join("predictions.csv")).unwrap();
        text.lines()
            .skip(1)
            .map(|l| EcgId(l.split(',').next().unwrap().parse().unwrap()))
            .collect()
    }

    pub fn bytes(&self, rel: &str) -> Vec<u8> {
        fs::read(self.dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

/// Result of scanning one run for patient leakage between training and evaluation rows.
pub fn leakage_violations(run: &Run, kind: &str) -> Vec<String> {
    let mut v = Vec::new();
    let split = run.split().split;
    let sets = [
        ("external", &split.external),
        ("internal_train", &split.internal_train),
        ("internal_val", &split.internal_val),
    ];
    for i in 0..3 {
        for j in i + 1..3 {
            for p in sets[i].1 {
                if sets[j].1.contains(p) {
                    v.push(format!("patient {p} in both {} and {}", sets[i].0, sets[j].0));
                }
            }
        }
    }
    for stage in [1u8, 2] {
        let train = run.train_rows(stage, kind);
        let eval = run.eval_rows(stage, kind);
        for e in &eval {
            for t in &train {
                if e.patient_id == t.patient_id {
                    v.push(format!(
                        "stage {stage}: eval ECG {} and train ECG {} share patient {}",
                        e.ecg_id, t.ecg_id, e.patient_id
                    ));
                }
            }
        }
    }
    v
}

/// Independent first-ECG audit. Returns (violations, number of non-first
/// ECGs that existed in the evaluated partitions).
pub fn first_ecg_violations(run: &Run, kind: &str) -> (Vec<String>, usize) {
    let metas = run.metas();
    let links = run.links();
    let acquired: HashMap<EcgId, i64> = metas.iter().map(|m| (m.ecg_id, m.acquired_at)).collect();
    let mut by_episode: BTreeMap<EpisodeId, Vec<EcgId>> = BTreeMap::new();
    for l in &links {
        by_episode.entry(l.episode_id).or_default().push(l.ecg_id);
    }
    // ECGs that are first in at least one of their episodes
    let mut firsts = BTreeSet::new();
    for ecgs in by_episode.values() {
        let first = ecgs.iter().min_by_key(|&&e| (acquired[&e], e)).unwrap();
        firsts.insert(*first);
    }
    let linked: BTreeSet<EcgId> = links.iter().map(|l| l.ecg_id).collect();
    let later: BTreeSet<EcgId> = linked.difference(&firsts).copied().collect();

    let mut v = Vec::new();
    let mut later_in_scope = 0;
    for stage in [1u8, 2] {
        let rows = run.eval_rows(stage, kind);
        let patients: BTreeSet<PatientId> = rows.iter().map(|r| r.patient_id).collect();
        let meta_patient: HashMap<EcgId, PatientId> = metas.iter().map(|m| (m.ecg_id, m.patient_id)).collect();
        later_in_scope += later.iter().filter(|e| patients.contains(&meta_patient[e])).count();
        for r in &rows {
            let ecgs = &by_episode[&r.episode_id];
            for &other in ecgs {
                if (acquired[&other], other) < (acquired[&r.ecg_id], r.ecg_id) {
                    v.push(format!(
                        "stage {stage}: ECG {} listed for episode {} but ECG {other} came first",
                        r.ecg_id, r.episode_id
                    ));
                }
            }
        }
        let predicted = run.predicted_ecgs(stage, kind);
        for id in &predicted {
            if later.contains(id) {
                v.push(format!("stage {stage}: non-first ECG {id} was scored"));
            }
        }
        let audited: BTreeSet<EcgId> = rows.iter().map(|r| r.ecg_id).collect();
        let scored: BTreeSet<EcgId> = predicted.iter().copied().collect();
        if audited != scored {
            v.push(format!("stage {stage}: scored ECGs differ from the audit log"));
        }
        for m in run.metrics(stage, kind) {
            if m.n_eval != scored.len() {
                v.push(format!("stage {stage}: {} evaluated on {} rows, audit lists {}", m.label, m.n_eval, scored.len()));
            }
        }
    }
    (v, later_in_scope)
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
