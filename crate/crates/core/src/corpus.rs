//! Synthetic frame-labeled corpus.
//!
//! Each class is a pair of second-order resonators (class-specific center
//! frequencies drawn once per corpus, spaced at least 200 Hz apart) driven by
//! white noise. Utterances are random class segments of 5-40 frames on the
//! 10 ms grid, so every frame has a label by construction. Segment lengths
//! are short against reverberation smearing at t60 >= 0.3 s, which is what
//! makes long-range context informative. Reverberated copies share labels
//! with their clean sources.
//!
//! On-disk layout: `manifest.json` plus one payload file per utterance
//! (u64 sample count, f64 samples, u64 label count, i32 labels, all
//! little-endian).

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustics::{
    apply_rir, cmvn, melfb, synth_rir, AudioError, FeatureSequence, Waveform, FRAME_LEN,
    FRAME_SHIFT, SAMPLE_RATE,
};
use crate::rng::{derive_seed, Rng};

pub const MIN_SEGMENT_FRAMES: u64 = 5;
pub const MAX_SEGMENT_FRAMES: u64 = 40;
pub const RESONATOR_RADIUS: f64 = 0.97;
pub const MIN_RESONATOR_SPACING_HZ: f64 = 200.0;
const BAND_LO_HZ: f64 = 200.0;
const BAND_HI_HZ: f64 = 3800.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(
        "cannot place {needed} resonators in [{BAND_LO_HZ}, {BAND_HI_HZ}] Hz with \
         {MIN_RESONATOR_SPACING_HZ} Hz spacing (K={k} too large)"
    )]
    InfeasibleClassCount { k: usize, needed: usize },
    #[error("corpus needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub num_classes: usize,
    pub train_utts: usize,
    pub dev_utts: usize,
    pub eval_utts: usize,
    pub frames_per_utt: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_classes: 8,
            train_utts: 400,
            dev_utts: 50,
            eval_utts: 50,
            frames_per_utt: 300,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Some(match s {
            "train" => Split::Train,
            "dev" => Split::Dev,
            "eval" => Split::Eval,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Condition {
    Clean,
    Reverb { t60: f64, seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UttEntry {
    pub id: String,
    pub file: String,
    pub split: Split,
    pub condition: Condition,
    pub samples: u64,
    pub frames: u64,
    /// Payload file size; checked on load.
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    #[serde(rename = "k")]
    pub num_classes: usize,
    #[serde(rename = "fs")]
    pub sample_rate: u32,
    pub seed: u64,
    pub utterances: Vec<UttEntry>,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub waveform: Waveform,
    pub labels: Vec<u32>,
    pub condition: Condition,
}

// ---------------------------------------------------------------------------
// Class filters
// ---------------------------------------------------------------------------

/// Two-pole resonator bank: one (f1, f2) pair per class.
#[derive(Debug, Clone)]
struct ClassBank {
    pairs: Vec<(f64, f64)>,
}

/// Draws 2K center frequencies on a jittered grid (guaranteeing the spacing
/// invariant), shuffles them, and pairs them off per class.
fn draw_class_bank(k: usize, seed: u64) -> Result<ClassBank, CorpusError> {
    if k < 2 {
        return Err(CorpusError::TooFewClasses(k));
    }
    let needed = 2 * k;
    let slot = (BAND_HI_HZ - BAND_LO_HZ) / needed as f64;
    if slot < MIN_RESONATOR_SPACING_HZ {
        return Err(CorpusError::InfeasibleClassCount { k, needed });
    }
    let mut rng = Rng::new(derive_seed(seed, 0xC1A5_5E5));
    let jitter = (slot - MIN_RESONATOR_SPACING_HZ) / 2.0;
    let mut freqs: Vec<f64> = (0..needed)
        .map(|i| {
            let center = BAND_LO_HZ + (i as f64 + 0.5) * slot;
            center + rng.uniform(-jitter, jitter)
        })
        .collect();
    rng.shuffle(&mut freqs);
    let pairs = freqs.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    Ok(ClassBank { pairs })
}

/// One second-order all-pole resonator: y[n] = 2r cos(w) y[n-1] - r^2 y[n-2] + x[n].
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64) -> f64 {
        let omega = std::f64::consts::TAU * freq / SAMPLE_RATE as f64;
        let a1 = 2.0 * RESONATOR_RADIUS * omega.cos();
        let a2 = -RESONATOR_RADIUS * RESONATOR_RADIUS;
        let y = a1 * self.y1 + a2 * self.y2 + x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn synth_utterance(
    bank: &ClassBank,
    frames: usize,
    utt_seed: u64,
) -> (Vec<f64>, Vec<u32>) {
    let mut rng = Rng::new(utt_seed);
    let k = bank.pairs.len() as u64;

    // Segment schedule first, then synthesis; labels come from the schedule.
    let mut labels: Vec<u32> = Vec::with_capacity(frames);
    let mut segments: Vec<(u32, usize)> = Vec::new();
    while labels.len() < frames {
        let remaining = frames - labels.len();
        let len = rng
            .range_inclusive(MIN_SEGMENT_FRAMES, MAX_SEGMENT_FRAMES)
            .min(remaining as u64) as usize;
        let class = rng.below(k) as u32;
        segments.push((class, len));
        labels.extend(std::iter::repeat_n(class, len));
    }

    // Waveform: frames*80 + 120 samples so the mel frame count equals the
    // label count; the tail continues the last segment's process.
    let mut samples = Vec::with_capacity(frames * FRAME_SHIFT + (FRAME_LEN - FRAME_SHIFT));
    let last = segments.len() - 1;
    for (i, &(class, len)) in segments.iter().enumerate() {
        let (f1, f2) = bank.pairs[class as usize];
        let mut r1 = Resonator::default();
        let mut r2 = Resonator::default();
        let mut n = len * FRAME_SHIFT;
        if i == last {
            n += FRAME_LEN - FRAME_SHIFT;
        }
        for _ in 0..n {
            let e = rng.normal();
            samples.push(r1.step(e, f1) + r2.step(e, f2) + 0.05 * e);
        }
    }

    // Unit-RMS normalization.
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt();
    if rms > 0.0 {
        samples.iter_mut().for_each(|s| *s /= rms);
    }
    (samples, labels)
}

// ---------------------------------------------------------------------------
// Generation and reverberation
// ---------------------------------------------------------------------------

/// Generates a clean corpus into `dir` and returns its manifest.
/// Deterministic: the same config regenerates byte-identical payloads.
pub fn generate_corpus(config: &CorpusConfig, dir: &Path) -> Result<CorpusManifest, CorpusError> {
    let bank = draw_class_bank(config.num_classes, config.seed)?;
    std::fs::create_dir_all(dir)?;

    let mut utterances = Vec::new();
    let splits = [
        (Split::Train, config.train_utts),
        (Split::Dev, config.dev_utts),
        (Split::Eval, config.eval_utts),
    ];
    let mut global_ix = 0u64;
    for (split, count) in splits {
        for i in 0..count {
            let id = format!("{}_{i:04}", split.name());
            let utt_seed = derive_seed(config.seed, global_ix);
            let (samples, labels) = synth_utterance(&bank, config.frames_per_utt, utt_seed);
            let file = format!("{id}.bin");
            let bytes = write_payload(&dir.join(&file), &samples, &labels)?;
            utterances.push(UttEntry {
                id,
                file,
                split,
                condition: Condition::Clean,
                samples: samples.len() as u64,
                frames: labels.len() as u64,
                bytes,
            });
            global_ix += 1;
        }
    }

    let manifest = CorpusManifest {
        num_classes: config.num_classes,
        sample_rate: SAMPLE_RATE,
        seed: config.seed,
        utterances,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Writes a reverberated copy of `src` into `out`: per-utterance impulse
/// responses at the given t60 (fresh seed per utterance), labels unchanged.
pub fn reverberate_corpus(
    src: &Path,
    t60: f64,
    seed: u64,
    out: &Path,
) -> Result<CorpusManifest, CorpusError> {
    let manifest = load_manifest(src)?;
    std::fs::create_dir_all(out)?;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for (ix, entry) in manifest.utterances.iter().enumerate() {
        let utt = load_utterance(src, entry, manifest.sample_rate)?;
        let rir_seed = derive_seed(seed, ix as u64);
        let rir = synth_rir(t60, manifest.sample_rate, rir_seed)?;
        let wet = apply_rir(&utt.waveform, &rir)?;
        let bytes = write_payload(&out.join(&entry.file), &wet.samples, &utt.labels)?;
        utterances.push(UttEntry {
            condition: Condition::Reverb {
                t60,
                seed: rir_seed,
            },
            samples: wet.len() as u64,
            bytes,
            ..entry.clone()
        });
    }
    let manifest = CorpusManifest {
        utterances,
        ..manifest
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

/// In-memory reverberation of one utterance (used by experiment drivers that
/// do not need a corpus directory on disk).
pub fn reverberate_utterance(
    utt: &Utterance,
    t60: f64,
    rir_seed: u64,
) -> Result<Utterance, CorpusError> {
    let rir = synth_rir(t60, utt.waveform.sample_rate, rir_seed)?;
    let wet = apply_rir(&utt.waveform, &rir)?;
    Ok(Utterance {
        id: utt.id.clone(),
        waveform: wet,
        labels: utt.labels.clone(),
        condition: Condition::Reverb {
            t60,
            seed: rir_seed,
        },
    })
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

fn write_payload(path: &Path, samples: &[f64], labels: &[u32]) -> Result<u64, CorpusError> {
    let mut out = Vec::with_capacity(16 + samples.len() * 8 + labels.len() * 4);
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(out.len() as u64)
}

fn read_payload(path: &Path) -> Result<(Vec<f64>, Vec<u32>), CorpusError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| CorpusError::Manifest(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(fail("payload shorter than its sample header"));
    }
    let n_samples = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let label_header = 8 + n_samples * 8;
    if bytes.len() < label_header + 8 {
        return Err(fail("payload shorter than its label header"));
    }
    let samples = bytes[8..label_header]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let n_labels =
        u64::from_le_bytes(bytes[label_header..label_header + 8].try_into().unwrap()) as usize;
    let label_bytes = &bytes[label_header + 8..];
    if label_bytes.len() != n_labels * 4 {
        return Err(fail("label payload length mismatch"));
    }
    let labels = label_bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as u32)
        .collect();
    Ok((samples, labels))
}

fn write_manifest(dir: &Path, manifest: &CorpusManifest) -> Result<(), CorpusError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| CorpusError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Loads and checks a manifest: splits disjoint by construction (ids carry
/// the split), every payload present with its recorded size.
pub fn load_manifest(dir: &Path) -> Result<CorpusManifest, CorpusError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for entry in &manifest.utterances {
        if !seen.insert(entry.id.clone()) {
            return Err(CorpusError::Manifest(format!(
                "duplicate utterance id `{}`",
                entry.id
            )));
        }
        let path = dir.join(&entry.file);
        let meta = std::fs::metadata(&path).map_err(|e| {
            CorpusError::Manifest(format!("payload `{}` missing: {e}", entry.file))
        })?;
        if meta.len() != entry.bytes {
            return Err(CorpusError::Manifest(format!(
                "payload `{}` is {} bytes, manifest records {}",
                entry.file,
                meta.len(),
                entry.bytes
            )));
        }
    }
    Ok(manifest)
}

pub fn load_utterance(
    dir: &Path,
    entry: &UttEntry,
    sample_rate: u32,
) -> Result<Utterance, CorpusError> {
    let (samples, labels) = read_payload(&dir.join(&entry.file))?;
    if samples.len() as u64 != entry.samples || labels.len() as u64 != entry.frames {
        return Err(CorpusError::Manifest(format!(
            "payload `{}` shape disagrees with manifest",
            entry.file
        )));
    }
    Ok(Utterance {
        id: entry.id.clone(),
        waveform: Waveform::new(samples, sample_rate),
        labels,
        condition: entry.condition,
    })
}

/// CMVN-normalized features plus labels; errors if the mel frame count does
/// not equal the label count.
pub fn features_for(utt: &Utterance) -> Result<(FeatureSequence, Vec<u32>), CorpusError> {
    let feats = cmvn(&melfb(&utt.waveform)?);
    if feats.frames() != utt.labels.len() {
        return Err(CorpusError::Manifest(format!(
            "utterance `{}`: {} feature frames vs {} labels",
            utt.id,
            feats.frames(),
            utt.labels.len()
        )));
    }
    Ok((feats, utt.labels.clone()))
}

pub fn load_split(
    dir: &Path,
    manifest: &CorpusManifest,
    split: Split,
) -> Result<Vec<Utterance>, CorpusError> {
    manifest
        .utterances
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_utterance(dir, e, manifest.sample_rate))
        .collect()
}
