//! Synthetic 12-lead cohorts with disease-conditioned morphology.
//!
//! Each beat is a sum of five Gaussian waves (P, Q, R, S, T) in phase
//! coordinates. Every wave is projected onto the 12 leads by a fixed
//! vector. A beat train at the patient's heart rate fills a fixed-length
//! recording, and white Gaussian noise is added. Diseases are drawn per
//! patient and perturb the beat model. Every episode of a patient carries
//! exactly that patient's disease codes.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    write_episodes_csv, write_metadata_csv, CohortError, EcgId, EcgMeta, Episode, EpisodeId, EpisodeKind, PatientId,
    QualityFlags, Sex, Timestamp,
};
use crate::icd::IcdCode;
use crate::signal::{write_container, EcgTrace, SignalError, N_LEADS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WaveKind {
    P,
    Q,
    R,
    S,
    T,
}

impl WaveKind {
    pub const ALL: [WaveKind; 5] = [WaveKind::P, WaveKind::Q, WaveKind::R, WaveKind::S, WaveKind::T];
}

/// One Gaussian wave: amplitude in mV, center and width as fractions of the beat period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveletParam {
    pub p: Wave,
    pub q: Wave,
    pub r: Wave,
    pub s: Wave,
    pub t: Wave,
}

impl Default for WaveletParam {
    fn default() -> Self {
        let w = |amplitude, center, width| Wave {
            amplitude,
            center,
            width,
        };
        WaveletParam {
            p: w(0.15, 0.20, 0.025),
            q: w(-0.10, 0.34, 0.010),
            r: w(1.00, 0.37, 0.012),
            s: w(-0.20, 0.40, 0.012),
            t: w(0.30, 0.62, 0.045),
        }
    }
}

impl WaveletParam {
    pub fn wave(&self, k: WaveKind) -> &Wave {
        match k {
            WaveKind::P => &self.p,
            WaveKind::Q => &self.q,
            WaveKind::R => &self.r,
            WaveKind::S => &self.s,
            WaveKind::T => &self.t,
        }
    }

    pub fn wave_mut(&mut self, k: WaveKind) -> &mut Wave {
        match k {
            WaveKind::P => &mut self.p,
            WaveKind::Q => &mut self.q,
            WaveKind::R => &mut self.r,
            WaveKind::S => &mut self.s,
            WaveKind::T => &mut self.t,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let waves = WaveKind::ALL.map(|k| *self.wave(k));
        if waves.iter().any(|w| !(w.width > 0.0) || !w.amplitude.is_finite() || !w.center.is_finite()) {
            return Err(SynthError::Config("wave widths must be positive and all values finite".into()));
        }
        if waves.windows(2).any(|p| p[0].center >= p[1].center) {
            return Err(SynthError::Config("wave centers must satisfy P < Q < R < S < T".into()));
        }
        Ok(())
    }

    /// Value at beat phase `phase` (fraction of the period).
    pub fn at_phase(&self, phase: f64) -> f64 {
        WaveKind::ALL
            .iter()
            .map(|&k| {
                let w = self.wave(k);
                w.amplitude * (-(phase - w.center).powi(2) / (2.0 * w.width * w.width)).exp()
            })
            .sum()
    }
}

/// One beat of `period_s` seconds sampled at `rate_hz`, starting at phase 0.
pub fn synth_beat(params: &WaveletParam, rate_hz: f64, period_s: f64) -> Vec<f64> {
    let n = (period_s * rate_hz).round() as usize;
    (0..n).map(|i| params.at_phase(i as f64 / rate_hz / period_s)).collect()
}

/// Per-wave lead projection. Column order: I, II, III, aVR, aVL, aVF, V1–V6.
pub const LEAD_PROJECTION: [[f64; N_LEADS]; 5] = [
    [0.6, 1.0, 0.4, -0.8, 0.1, 0.7, 0.3, 0.4, 0.5, 0.6, 0.6, 0.5],
    [0.3, 0.5, 0.2, -0.4, 0.1, 0.3, 0.0, 0.2, 0.4, 0.6, 0.7, 0.6],
    [0.7, 1.0, 0.3, -0.85, 0.2, 0.65, -0.4, 0.3, 0.9, 1.2, 1.1, 0.9],
    [0.4, 0.6, 0.2, -0.5, 0.1, 0.4, 1.2, 1.0, 0.7, 0.4, 0.2, 0.1],
    [0.5, 0.8, 0.3, -0.6, 0.2, 0.55, 0.1, 0.6, 0.8, 0.9, 0.8, 0.6],
];

/// ST-segment projection: positive in inferior and lateral precordial leads.
pub const ST_PROJECTION: [f64; N_LEADS] = [0.2, 1.0, 0.8, -0.6, -0.4, 0.9, -0.2, 0.3, 0.6, 0.9, 0.8, 0.5];

const ST_WIDTH: f64 = 0.05;

/// Parameter perturbation of one disease at full strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Effect {
    /// Heart rate multiplied by `factor`.
    HeartRateMultiplier { factor: f64 },
    /// T-wave center moved by `shift` (fraction of period).
    TCenterShift { shift: f64 },
    /// ST-segment level raised by `offset_mv` on [`ST_PROJECTION`].
    StOffset { offset_mv: f64 },
    /// One wave's amplitude multiplied by `factor`.
    AmplitudeScale { wave: WaveKind, factor: f64 },
    /// Extra white-noise standard deviation in mV.
    NoiseStd { std_mv: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseSpec {
    pub code: IcdCode,
    pub prevalence: f64,
    #[serde(default)]
    pub effects: Vec<Effect>,
    /// 0 makes the disease a pure label with no waveform change.
    pub effect_strength: f64,
    /// Log-odds change per standard deviation of age.
    #[serde(default)]
    pub age_logit_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub episodes_per_patient: [usize; 2],
    pub ecgs_per_episode: [usize; 2],
    pub diseases: Vec<DiseaseSpec>,
    pub age_range: [f64; 2],
    pub male_fraction: f64,
    pub base_heart_rate_bpm: [f64; 2],
    pub noise_std_mv: f64,
    /// Per-patient relative spread of wave amplitudes.
    pub amplitude_jitter: f64,
    pub sampling_rate_hz: f64,
    pub duration_s: f64,
    pub seed: u64,
}

/// 2010-01-01T00:00:00Z.
const EPOCH_START: Timestamp = 1_262_304_000;
const DAY: i64 = 86_400;
const HOUR: i64 = 3_600;

impl SynthConfig {
    /// 2,000 patients at 100 Hz × 10 s with three signature diseases and two null ones.
    pub fn desk(seed: u64) -> Self {
        let code = |c: &str| IcdCode::parse(c).expect("valid code");
        let disease = |c, effects, strength| DiseaseSpec {
            code: code(c),
            prevalence: 0.15,
            effects,
            effect_strength: strength,
            age_logit_slope: 0.0,
        };
        SynthConfig {
            n_patients: 2000,
            episodes_per_patient: [1, 2],
            ecgs_per_episode: [1, 2],
            diseases: vec![
                disease("I480", vec![Effect::HeartRateMultiplier { factor: 1.6 }], 1.0),
                disease("I214", vec![Effect::StOffset { offset_mv: 0.25 }], 1.0),
                DiseaseSpec {
                    age_logit_slope: 0.5,
                    ..disease(
                        "E875",
                        vec![Effect::AmplitudeScale {
                            wave: WaveKind::T,
                            factor: 2.0,
                        }],
                        1.0,
                    )
                },
                disease("F329", vec![], 0.0),
                disease("J189", vec![Effect::NoiseStd { std_mv: 0.05 }], 0.0),
            ],
            age_range: [18.0, 90.0],
            male_fraction: 0.5,
            base_heart_rate_bpm: [55.0, 85.0],
            noise_std_mv: 0.03,
            amplitude_jitter: 0.15,
            sampling_rate_hz: 100.0,
            duration_s: 10.0,
            seed,
        }
    }

    /// Same cohort shape at 500 Hz.
    pub fn paper_scale(seed: u64) -> Self {
        SynthConfig {
            sampling_rate_hz: 500.0,
            ..SynthConfig::desk(seed)
        }
    }

    pub fn samples_per_lead(&self) -> usize {
        (self.sampling_rate_hz * self.duration_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        let range_ok = |r: [usize; 2]| r[0] >= 1 && r[0] <= r[1] && r[1] < 100;
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if !range_ok(self.episodes_per_patient) || !range_ok(self.ecgs_per_episode) {
            return bad("episode and ECG ranges need 1 <= min <= max < 100");
        }
        if !(self.age_range[0] >= 18.0 && self.age_range[0] <= self.age_range[1]) {
            return bad("age_range must be ordered with adult minimum");
        }
        if !(0.0..=1.0).contains(&self.male_fraction) {
            return bad("male_fraction must be in [0, 1]");
        }
        let hr = self.base_heart_rate_bpm;
        if !(hr[0] > 0.0 && hr[0] <= hr[1]) {
            return bad("base_heart_rate_bpm must be positive and ordered");
        }
        if !(self.noise_std_mv >= 0.0 && self.amplitude_jitter >= 0.0 && self.amplitude_jitter < 1.0) {
            return bad("noise_std_mv must be >= 0 and amplitude_jitter in [0, 1)");
        }
        if !(self.sampling_rate_hz > 0.0 && self.duration_s > 0.0) || self.samples_per_lead() == 0 {
            return bad("sampling geometry must give at least one sample");
        }
        for d in &self.diseases {
            if !(d.prevalence > 0.0 && d.prevalence < 1.0) {
                return Err(SynthError::Config(format!("{}: prevalence must be in (0, 1)", d.code)));
            }
            if !(d.effect_strength >= 0.0) {
                return Err(SynthError::Config(format!("{}: effect_strength must be >= 0", d.code)));
            }
        }
        WaveletParam::default().validate()
    }

    pub fn from_json(s: &str) -> Result<Self, SynthError> {
        let cfg: SynthConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Waveform parameters of one recording.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeatModel {
    pub waves: WaveletParam,
    pub heart_rate_bpm: f64,
    pub st_offset_mv: f64,
    pub noise_std_mv: f64,
}

impl BeatModel {
    /// Applies `effect` scaled by `strength`: multiplicative factors move
    /// as `1 + strength·(factor − 1)`, additive terms as `strength·value`.
    pub fn apply(&mut self, effect: &Effect, strength: f64) {
        match *effect {
            Effect::HeartRateMultiplier { factor } => self.heart_rate_bpm *= 1.0 + strength * (factor - 1.0),
            Effect::TCenterShift { shift } => self.waves.t.center += strength * shift,
            Effect::StOffset { offset_mv } => self.st_offset_mv += strength * offset_mv,
            Effect::AmplitudeScale { wave, factor } => self.waves.wave_mut(wave).amplitude *= 1.0 + strength * (factor - 1.0),
            Effect::NoiseStd { std_mv } => self.noise_std_mv += strength * std_mv,
        }
    }

    /// Noise-free lead-major 12 × n trace; beat phase starts at `phase0`.
    pub fn render(&self, rate_hz: f64, n: usize, phase0: f64) -> Vec<f64> {
        let period = 60.0 / self.heart_rate_bpm;
        let st_center = 0.5 * (self.waves.s.center + self.waves.t.center);
        let mut out = vec![0.0; N_LEADS * n];
        for i in 0..n {
            let phase = (phase0 + i as f64 / rate_hz / period).fract();
            let per_wave = WaveKind::ALL.map(|k| {
                let w = self.waves.wave(k);
                w.amplitude * (-(phase - w.center).powi(2) / (2.0 * w.width * w.width)).exp()
            });
            let st = self.st_offset_mv * (-(phase - st_center).powi(2) / (2.0 * ST_WIDTH * ST_WIDTH)).exp();
            for l in 0..N_LEADS {
                let mut v = st * ST_PROJECTION[l];
                for (w, &a) in per_wave.iter().enumerate() {
                    v += a * LEAD_PROJECTION[w][l];
                }
                out[l * n + i] = v;
            }
        }
        out
    }
}

/// Ground truth of one generated patient.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPatient {
    pub patient_id: PatientId,
    pub codes: Vec<IcdCode>,
    pub traces: Vec<EcgTrace>,
    pub episodes: Vec<Episode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCohort {
    pub patients: Vec<SynthPatient>,
}

impl SynthCohort {
    pub fn traces(&self) -> impl Iterator<Item = &EcgTrace> {
        self.patients.iter().flat_map(|p| p.traces.iter())
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.patients.iter().flat_map(|p| p.episodes.iter())
    }

    pub fn metadata(&self) -> Vec<EcgMeta> {
        self.traces().map(|t| t.meta.clone()).collect()
    }

    /// Writes `ecgs.ecgb`, `episodes.csv` and `metadata.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SynthPaths, SynthError> {
        fs::create_dir_all(dir)?;
        let paths = SynthPaths {
            container: dir.join("ecgs.ecgb"),
            episodes: dir.join("episodes.csv"),
            metadata: dir.join("metadata.csv"),
        };
        let traces: Vec<EcgTrace> = self.traces().cloned().collect();
        write_container(&paths.container, &traces)?;
        let episodes: Vec<Episode> = self.episodes().cloned().collect();
        write_episodes_csv(BufWriter::new(fs::File::create(&paths.episodes)?), &episodes)?;
        write_metadata_csv(BufWriter::new(fs::File::create(&paths.metadata)?), &self.metadata())?;
        Ok(paths)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthPaths {
    pub container: PathBuf,
    pub episodes: PathBuf,
    pub metadata: PathBuf,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Generates patient `index` from its own ChaCha8 stream, so patients can be
/// produced in any order or in parallel.
pub fn synth_patient(cfg: &SynthConfig, index: usize) -> Result<SynthPatient, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let pid = index as u64 + 1;

    let [age_lo, age_hi] = cfg.age_range;
    let age0 = if age_hi > age_lo { rng.random_range(age_lo..age_hi) } else { age_lo };
    // uniform age distribution: standard deviation of U(lo, hi)
    let age_z = if age_hi > age_lo {
        (age0 - 0.5 * (age_lo + age_hi)) / ((age_hi - age_lo) / 12f64.sqrt())
    } else {
        0.0
    };
    let sex = if rng.random_bool(cfg.male_fraction) { Sex::Male } else { Sex::Female };

    let mut codes = Vec::new();
    let mut model = BeatModel {
        waves: WaveletParam::default(),
        heart_rate_bpm: rng.random_range(cfg.base_heart_rate_bpm[0]..=cfg.base_heart_rate_bpm[1]),
        st_offset_mv: 0.0,
        noise_std_mv: cfg.noise_std_mv,
    };
    for k in WaveKind::ALL {
        let j = cfg.amplitude_jitter;
        let w = model.waves.wave_mut(k);
        w.amplitude *= if j > 0.0 { rng.random_range(1.0 - j..1.0 + j) } else { 1.0 };
    }
    for d in &cfg.diseases {
        let p = sigmoid(logit(d.prevalence) + d.age_logit_slope * age_z);
        if rng.random_bool(p) {
            codes.push(d.code.clone());
            for e in &d.effects {
                model.apply(e, d.effect_strength);
            }
        }
    }
    codes.sort();
    codes.dedup();

    let n_eps = rng.random_range(cfg.episodes_per_patient[0]..=cfg.episodes_per_patient[1]);
    let n = cfg.samples_per_lead();
    let noise = Normal::new(0.0, model.noise_std_mv.max(0.0)).map_err(|e| SynthError::Config(e.to_string()))?;
    let mut t = EPOCH_START + rng.random_range(0..365 * DAY);
    let mut episodes = Vec::with_capacity(n_eps);
    let mut traces = Vec::new();
    for k in 0..n_eps {
        let (kind, length) = if rng.random_bool(0.5) {
            (EpisodeKind::EmergencyDepartment, rng.random_range(2 * HOUR..=12 * HOUR))
        } else {
            (EpisodeKind::Hospitalization, rng.random_range(DAY..=10 * DAY))
        };
        let episode_id = EpisodeId(pid * 100 + k as u64);
        let (start, end) = (t, t + length);
        let n_ecg = rng.random_range(cfg.ecgs_per_episode[0]..=cfg.ecgs_per_episode[1]);
        let mut times: Vec<Timestamp> = (0..n_ecg).map(|_| rng.random_range(start..=end)).collect();
        times.sort_unstable();
        for (j, &at) in times.iter().enumerate() {
            let age = age0 + (at - EPOCH_START) as f64 / (365.25 * DAY as f64);
            let meta = EcgMeta {
                ecg_id: EcgId(pid * 10_000 + k as u64 * 100 + j as u64),
                patient_id: PatientId(pid),
                acquired_at: at,
                age_years: age as f32,
                sex,
                quality: QualityFlags::default(),
                has_device: false,
            };
            let phase0 = rng.random_range(0.0..1.0);
            let clean = model.render(cfg.sampling_rate_hz, n, phase0);
            let samples = clean
                .into_iter()
                .map(|v| {
                    let e = if model.noise_std_mv > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (v + e) as f32
                })
                .collect();
            traces.push(EcgTrace::new(meta, cfg.sampling_rate_hz as f32, n, samples)?);
        }
        episodes.push(Episode {
            episode_id,
            patient_id: PatientId(pid),
            kind,
            start_time: start,
            end_time: end,
            codes: codes.clone(),
        });
        t = end + rng.random_range(30 * DAY..=365 * DAY);
    }
    Ok(SynthPatient {
        patient_id: PatientId(pid),
        codes,
        traces,
        episodes,
    })
}

pub fn synth_cohort(cfg: &SynthConfig) -> Result<SynthCohort, SynthError> {
    cfg.validate()?;
    let patients = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| synth_patient(cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SynthCohort { patients })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowStat {
    Mean,
    Max,
}

/// Statistic of lead `lead` over a window of `width_s` seconds starting
/// `offset_s` after each R peak, averaged across beats. R peaks are local
/// maxima of lead II above half its maximum.
pub fn beat_window(trace: &EcgTrace, lead: usize, offset_s: f64, width_s: f64, stat: WindowStat) -> Option<f64> {
    let rate = trace.sampling_rate_hz as f64;
    let x = trace.lead(lead);
    let (off, w) = ((offset_s * rate).round() as usize, ((width_s * rate).round() as usize).max(1));
    let vals: Vec<f64> = r_peaks(trace)
        .iter()
        .filter(|&&p| p + off + w <= x.len())
        .map(|&p| {
            let win = x[p + off..p + off + w].iter().map(|&v| v as f64);
            match stat {
                WindowStat::Mean => win.sum::<f64>() / w as f64,
                WindowStat::Max => win.fold(f64::MIN, f64::max),
            }
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Sample indices of R peaks on lead II.
pub fn r_peaks(trace: &EcgTrace) -> Vec<usize> {
    let x = trace.lead(1);
    let max = x.iter().copied().fold(f32::MIN, f32::max);
    let rate = trace.sampling_rate_hz as f64;
    // refractory period of 200 ms
    let gap = (0.2 * rate).round() as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..x.len().saturating_sub(1) {
        if x[i] > 0.5 * max && x[i] >= x[i - 1] && x[i] > x[i + 1] {
            match peaks.last() {
                Some(&p) if i - p < gap => {
                    if x[i] > x[p] {
                        *peaks.last_mut().expect("non-empty") = i;
                    }
                }
                _ => peaks.push(i),
            }
        }
    }
    peaks
}

/// Circular phase difference in [-0.5, 0.5).
pub fn phase_diff(a: f64, b: f64) -> f64 {
    (a - b + 0.5).rem_euclid(1.0) - 0.5
}
