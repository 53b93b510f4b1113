//! 12-lead waveforms, z-score normalization and the `ECGB` binary container.
//!
//! Container layout (all little-endian):
//!
//! ```text
//! header:  "ECGB" | version u16 = 1 | record_count u32 | leads u8 = 12
//!          | samples_per_lead u32 | sampling_rate_hz f32
//! record:  ecg_id u64 | patient_id u64 | acquired_at i64 | age_years f32
//!          | sex u8 (0=F, 1=M) | quality u8 | has_device u8
//!          | 12 * samples_per_lead f32, lead-major
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{EcgId, EcgMeta, PatientId, QualityFlags, Sex};

pub const N_LEADS: usize = 12;
pub const CONTAINER_MAGIC: &[u8; 4] = b"ECGB";
pub const CONTAINER_VERSION: u16 = 1;
pub const STD_FLOOR: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("not an ECGB container (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported ECGB version {0}")]
    VersionMismatch(u16),
    #[error("ECGB file is truncated")]
    TruncatedFile,
    #[error("ECG {0} contains a non-finite sample")]
    NonFiniteSample(EcgId),
    #[error("ECGB header declares {0} leads, expected 12")]
    LeadCount(u8),
    #[error("invalid field in record {ecg}: {msg}")]
    BadRecord { ecg: EcgId, msg: String },
    #[error("traces disagree on acquisition geometry")]
    GeometryMismatch,
    #[error("trace has {found} samples, expected {expected}")]
    SampleCount { expected: usize, found: usize },
    #[error("need at least {0} training traces")]
    InsufficientData(usize),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for SignalError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            SignalError::TruncatedFile
        } else {
            SignalError::Io(e)
        }
    }
}

/// One fixed-duration 12-lead recording in millivolts.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgTrace {
    pub meta: EcgMeta,
    pub sampling_rate_hz: f32,
    samples_per_lead: usize,
    /// Lead-major: `samples[lead * samples_per_lead + t]`.
    samples: Vec<f32>,
}

impl EcgTrace {
    pub fn new(
        meta: EcgMeta,
        sampling_rate_hz: f32,
        samples_per_lead: usize,
        samples: Vec<f32>,
    ) -> Result<Self, SignalError> {
        if samples.len() != N_LEADS * samples_per_lead {
            return Err(SignalError::SampleCount {
                expected: N_LEADS * samples_per_lead,
                found: samples.len(),
            });
        }
        if !(sampling_rate_hz > 0.0 && sampling_rate_hz.is_finite()) {
            return Err(SignalError::BadRecord {
                ecg: meta.ecg_id,
                msg: format!("sampling rate {sampling_rate_hz}"),
            });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SignalError::NonFiniteSample(meta.ecg_id));
        }
        Ok(EcgTrace {
            meta,
            sampling_rate_hz,
            samples_per_lead,
            samples,
        })
    }

    pub fn samples_per_lead(&self) -> usize {
        self.samples_per_lead
    }

    pub fn duration_s(&self) -> f32 {
        self.samples_per_lead as f32 / self.sampling_rate_hz
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn lead(&self, l: usize) -> &[f32] {
        &self.samples[l * self.samples_per_lead..(l + 1) * self.samples_per_lead]
    }
}

/// Per-lead and age z-score parameters, fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub lead_mean: [f32; N_LEADS],
    pub lead_std: [f32; N_LEADS],
    pub age_mean: f32,
    pub age_std: f32,
}

/// Network-ready view of one trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub signal: Vec<f32>,
    pub age_norm: f32,
    pub sex_bit: f32,
}

/// Neumaier-compensated running sum; keeps the pooled statistics stable
/// regardless of trace order.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

fn floor_std(v: f64) -> f32 {
    (v.max(0.0).sqrt() as f32).max(STD_FLOOR)
}

/// Pooled per-lead mean and population standard deviation, plus age moments.
pub fn fit_normalization(traces: &[&EcgTrace]) -> Result<NormalizationStats, SignalError> {
    if traces.len() < 2 {
        return Err(SignalError::InsufficientData(2));
    }
    let mut lead_mean = [0f32; N_LEADS];
    let mut lead_std = [0f32; N_LEADS];
    for l in 0..N_LEADS {
        let mut s = CompensatedSum::default();
        let mut n = 0usize;
        for t in traces {
            for &x in t.lead(l) {
                s.add(x as f64);
            }
            n += t.samples_per_lead;
        }
        let mean = s.value() / n as f64;
        let mut ss = CompensatedSum::default();
        for t in traces {
            for &x in t.lead(l) {
                let d = x as f64 - mean;
                ss.add(d * d);
            }
        }
        lead_mean[l] = mean as f32;
        lead_std[l] = floor_std(ss.value() / n as f64);
    }
    let n = traces.len() as f64;
    let mut s = CompensatedSum::default();
    traces.iter().for_each(|t| s.add(t.meta.age_years as f64));
    let age_mean = s.value() / n;
    let mut ss = CompensatedSum::default();
    traces.iter().for_each(|t| {
        let d = t.meta.age_years as f64 - age_mean;
        ss.add(d * d)
    });
    Ok(NormalizationStats {
        lead_mean,
        lead_std,
        age_mean: age_mean as f32,
        age_std: floor_std(ss.value() / n),
    })
}

pub fn normalize(trace: &EcgTrace, stats: &NormalizationStats) -> ModelInput {
    let mut signal = Vec::with_capacity(trace.samples.len());
    normalize_into(trace, stats, &mut signal);
    ModelInput {
        signal,
        age_norm: (trace.meta.age_years - stats.age_mean) / stats.age_std,
        sex_bit: trace.meta.sex.as_bit() as f32,
    }
}

/// Appends the normalized 12 × T signal to `out`.
pub fn normalize_into(trace: &EcgTrace, stats: &NormalizationStats, out: &mut Vec<f32>) {
    for l in 0..N_LEADS {
        let (m, s) = (stats.lead_mean[l], stats.lead_std[l]);
        out.extend(trace.lead(l).iter().map(|&x| (x - m) / s));
    }
}

/// Inverse of [`normalize`] for the signal part.
pub fn denormalize(signal: &[f32], samples_per_lead: usize, stats: &NormalizationStats) -> Vec<f32> {
    signal
        .chunks(samples_per_lead)
        .enumerate()
        .flat_map(|(l, lead)| lead.iter().map(move |&z| z * stats.lead_std[l] + stats.lead_mean[l]))
        .collect()
}

// ---------------------------------------------------------------------------
// ECGB container

pub fn encode_container<W: Write>(mut w: W, traces: &[EcgTrace]) -> Result<(), SignalError> {
    let (rate, spl) = match traces.first() {
        Some(t) => (t.sampling_rate_hz, t.samples_per_lead),
        None => (1.0, 0),
    };
    if traces
        .iter()
        .any(|t| t.sampling_rate_hz.to_bits() != rate.to_bits() || t.samples_per_lead != spl)
    {
        return Err(SignalError::GeometryMismatch);
    }
    let count = u32::try_from(traces.len()).map_err(|_| SignalError::GeometryMismatch)?;
    let spl32 = u32::try_from(spl).map_err(|_| SignalError::GeometryMismatch)?;
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&[N_LEADS as u8])?;
    w.write_all(&spl32.to_le_bytes())?;
    w.write_all(&rate.to_le_bytes())?;
    let mut buf = Vec::with_capacity(N_LEADS * spl * 4);
    for t in traces {
        let m = &t.meta;
        w.write_all(&m.ecg_id.0.to_le_bytes())?;
        w.write_all(&m.patient_id.0.to_le_bytes())?;
        w.write_all(&m.acquired_at.to_le_bytes())?;
        w.write_all(&m.age_years.to_le_bytes())?;
        w.write_all(&[m.sex.as_bit(), m.quality.to_bits(), m.has_device as u8])?;
        buf.clear();
        for s in &t.samples {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], SignalError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn decode_container<R: Read>(mut r: R) -> Result<Vec<EcgTrace>, SignalError> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != CONTAINER_MAGIC {
        return Err(SignalError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != CONTAINER_VERSION {
        return Err(SignalError::VersionMismatch(version));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let [leads] = read_array(&mut r)?;
    if leads as usize != N_LEADS {
        return Err(SignalError::LeadCount(leads));
    }
    let spl = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let rate = f32::from_le_bytes(read_array(&mut r)?);

    let mut traces = Vec::with_capacity(count.min(1 << 16));
    let mut raw = vec![0u8; N_LEADS * spl * 4];
    for _ in 0..count {
        let ecg_id = EcgId(u64::from_le_bytes(read_array(&mut r)?));
        let patient_id = PatientId(u64::from_le_bytes(read_array(&mut r)?));
        let acquired_at = i64::from_le_bytes(read_array(&mut r)?);
        let age_years = f32::from_le_bytes(read_array(&mut r)?);
        let [sex, quality, device] = read_array(&mut r)?;
        let bad = |msg: String| SignalError::BadRecord { ecg: ecg_id, msg };
        let sex = Sex::from_bit(sex).ok_or_else(|| bad(format!("sex byte {sex}")))?;
        let quality = QualityFlags::from_bits(quality).ok_or_else(|| bad(format!("quality byte {quality:#x}")))?;
        let has_device = match device {
            0 => false,
            1 => true,
            d => return Err(bad(format!("has_device byte {d}"))),
        };
        r.read_exact(&mut raw)?;
        let samples: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let meta = EcgMeta {
            ecg_id,
            patient_id,
            acquired_at,
            age_years,
            sex,
            quality,
            has_device,
        };
        traces.push(EcgTrace::new(meta, rate, spl, samples)?);
    }
    Ok(traces)
}

pub fn write_container(path: &Path, traces: &[EcgTrace]) -> Result<(), SignalError> {
    let f = File::create(path)?;
    encode_container(BufWriter::new(f), traces)
}

pub fn read_container(path: &Path) -> Result<Vec<EcgTrace>, SignalError> {
    let f = File::open(path)?;
    decode_container(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(id: u64, age: f32) -> EcgMeta {
        EcgMeta {
            ecg_id: EcgId(id),
            patient_id: PatientId(id + 100),
            acquired_at: 1_500_000_000 + id as i64,
            age_years: age,
            sex: if id % 2 == 0 { Sex::Male } else { Sex::Female },
            quality: QualityFlags::default(),
            has_device: false,
        }
    }

    fn trace_with_lead0(id: u64, age: f32, lead0: &[f32]) -> EcgTrace {
        let spl = lead0.len();
        let mut samples = vec![0.5f32; N_LEADS * spl];
        samples[..spl].copy_from_slice(lead0);
        EcgTrace::new(meta(id, age), 100.0, spl, samples).unwrap()
    }

    fn random_traces(n: usize, spl: usize, seed: u64) -> Vec<EcgTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let samples = (0..N_LEADS * spl).map(|_| rng.random_range(-2.0f32..2.0)).collect();
                let mut m = meta(i as u64, rng.random_range(18.0f32..90.0));
                m.quality = QualityFlags::from_bits(rng.random_range(0..32)).unwrap();
                EcgTrace::new(m, 500.0, spl, samples).unwrap()
            })
            .collect()
    }

    #[test]
    fn fit_examples() {
        let a = trace_with_lead0(1, 20.0, &[1.0, 3.0]);
        let b = trace_with_lead0(2, 40.0, &[5.0, 7.0]);
        let s = fit_normalization(&[&a, &b]).unwrap();
        assert_eq!(s.lead_mean[0], 4.0);
        assert!((s.lead_std[0] - 5f32.sqrt()).abs() < 1e-6);
        assert!((s.lead_std[0] - 2.2360).abs() < 1e-4);
        // every other lead is constant 0.5
        assert_eq!(s.lead_std[1], STD_FLOOR);
        assert_eq!(s.age_mean, 30.0);
        assert_eq!(s.age_std, 10.0);
        assert!(matches!(fit_normalization(&[&a]), Err(SignalError::InsufficientData(2))));
    }

    #[test]
    fn normalize_examples() {
        let mut stats = NormalizationStats {
            lead_mean: [4.0; N_LEADS],
            lead_std: [2.0; N_LEADS],
            age_mean: 50.0,
            age_std: 10.0,
        };
        let t = trace_with_lead0(2, 50.0, &[6.0, 4.0]);
        let x = normalize(&t, &stats);
        assert_eq!(&x.signal[..2], &[1.0, 0.0]);
        assert_eq!(x.age_norm, 0.0);
        assert_eq!(x.sex_bit, 1.0);
        stats.lead_mean = [0.5; N_LEADS];
        let flat = EcgTrace::new(meta(3, 60.0), 100.0, 2, vec![0.5; 24]).unwrap();
        let x = normalize(&flat, &stats);
        assert!(x.signal.iter().all(|&v| v == 0.0));
        assert_eq!(x.sex_bit, 0.0);
        assert_eq!(x.age_norm, 1.0);
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let traces = random_traces(3, 50, 9);
        let mut bytes = Vec::new();
        encode_container(&mut bytes, &traces).unwrap();
        assert_eq!(bytes.len(), 19 + 3 * (31 + N_LEADS * 50 * 4));
        let back = decode_container(&bytes[..]).unwrap();
        assert_eq!(back, traces);
        let mut again = Vec::new();
        encode_container(&mut again, &back).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn container_header_layout() {
        let traces = random_traces(2, 4, 1);
        let mut bytes = Vec::new();
        encode_container(&mut bytes, &traces).unwrap();
        assert_eq!(&bytes[0..4], b"ECGB");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(bytes[10], 12);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 4);
        assert_eq!(f32::from_le_bytes(bytes[15..19].try_into().unwrap()), 500.0);
        assert_eq!(u64::from_le_bytes(bytes[19..27].try_into().unwrap()), 0);
    }

    #[test]
    fn corrupted_containers_yield_typed_errors() {
        let traces = random_traces(5, 8, 2);
        let mut bytes = Vec::new();
        encode_container(&mut bytes, &traces).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad[..]), Err(SignalError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_container(&bad[..]), Err(SignalError::VersionMismatch(2))));

        // header promises 5 records, only 4 present
        let record = 31 + N_LEADS * 8 * 4;
        let short = &bytes[..bytes.len() - record];
        assert!(matches!(decode_container(short), Err(SignalError::TruncatedFile)));
        assert!(matches!(decode_container(&bytes[..10]), Err(SignalError::TruncatedFile)));

        let mut bad = bytes.clone();
        let first_sample = 19 + 31;
        bad[first_sample..first_sample + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_container(&bad[..]), Err(SignalError::NonFiniteSample(EcgId(0)))));
    }

    #[test]
    fn mixed_geometry_is_rejected() {
        let mut traces = random_traces(2, 8, 3);
        traces.push(random_traces(1, 9, 4).pop().unwrap());
        assert!(matches!(
            encode_container(Vec::new(), &traces),
            Err(SignalError::GeometryMismatch)
        ));
    }

    proptest! {
        #[test]
        fn normalize_round_trip(seed: u64) {
            let traces = random_traces(4, 16, seed);
            let refs: Vec<&EcgTrace> = traces.iter().collect();
            let stats = fit_normalization(&refs).unwrap();
            for t in &traces {
                let x = normalize(t, &stats);
                let back = denormalize(&x.signal, 16, &stats);
                for (a, b) in back.iter().zip(t.samples()) {
                    prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
                }
            }
        }

        #[test]
        fn fit_is_permutation_invariant(seed: u64, rot in 0usize..5) {
            let traces = random_traces(5, 32, seed);
            let mut refs: Vec<&EcgTrace> = traces.iter().collect();
            let a = fit_normalization(&refs).unwrap();
            refs.rotate_left(rot);
            refs.reverse();
            let b = fit_normalization(&refs).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
