//! Distant-speech simulation and objective quality measures.
//!
//! Synthetic exponential-decay room impulse responses stand in for measured
//! RIR databases: the direct path is pinned at lag 0 with unit gain (so frame
//! labels stay aligned after convolution) and the noise tail decays 60 dB by
//! `n = fs * t60`. Quality measures are the scale-compensated SNR, the
//! spectral Itakura-Saito distance, and the cepstral distance over 16
//! coefficients (c0 excluded, which makes CD exactly gain-invariant).
//! Feature extraction is 40-d log-mel at 8 kHz (25 ms Hamming frames, 10 ms
//! shift, 256-point transform) with per-utterance CMVN.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;

pub const SAMPLE_RATE: u32 = 8000;
pub const FRAME_LEN: usize = 200; // 25 ms at 8 kHz
pub const FRAME_SHIFT: usize = 80; // 10 ms at 8 kHz
pub const FFT_SIZE: usize = 256;
pub const NUM_BINS: usize = FFT_SIZE / 2 + 1;
pub const NUM_MELS: usize = 40;
pub const PREEMPHASIS: f64 = 0.97;
pub const POWER_FLOOR: f64 = 1e-10;
pub const CMVN_STD_FLOOR: f64 = 1e-8;
pub const CD_COEFFS: usize = 16;
pub const T60_MIN: f64 = 0.05;
pub const T60_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("t60 {0} outside [{T60_MIN}, {T60_MAX}] s")]
    T60OutOfRange(f64),
    #[error("sample-rate mismatch: {a} Hz vs {b} Hz")]
    SampleRateMismatch { a: u32, b: u32 },
    #[error("unsupported sample rate {0} Hz (the front end is fixed at 8 kHz)")]
    UnsupportedRate(u32),
    #[error("signals must have equal length: {a} vs {b} samples")]
    LengthMismatch { a: usize, b: usize },
    #[error("signal too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("reference signal has zero energy")]
    ZeroEnergyRef,
    #[error("wav: {0}")]
    Wav(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Sampled room impulse response with unit direct path at lag 0.
#[derive(Debug, Clone)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
    pub t60: f64,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// RIR synthesis and convolution
// ---------------------------------------------------------------------------

/// Amplitude envelope: unity at n=0, -60 dB at n = fs * t60.
fn decay_envelope(n: usize, fs: u32, t60: f64) -> f64 {
    10f64.powf(-3.0 * n as f64 / (fs as f64 * t60))
}

/// taps[0] = 1; taps[n] = g_n * 10^(-3n / (fs*t60)) with g_n standard normal
/// from the seeded generator; |taps| = ceil(1.5 * t60 * fs).
pub fn synth_rir(t60: f64, fs: u32, seed: u64) -> Result<Rir, AudioError> {
    if !(T60_MIN..=T60_MAX).contains(&t60) {
        return Err(AudioError::T60OutOfRange(t60));
    }
    let len = (1.5 * t60 * fs as f64).ceil() as usize;
    let mut rng = Rng::new(seed);
    let mut taps = Vec::with_capacity(len);
    taps.push(1.0);
    for n in 1..len {
        taps.push(rng.normal() * decay_envelope(n, fs, t60));
    }
    Ok(Rir {
        taps,
        sample_rate: fs,
        t60,
        seed,
    })
}

/// y[n] = sum_k h[k] * x[n-k], truncated to |x| samples. The unit direct
/// path at lag 0 keeps frame labels aligned.
pub fn apply_rir(x: &Waveform, h: &Rir) -> Result<Waveform, AudioError> {
    if x.sample_rate != h.sample_rate {
        return Err(AudioError::SampleRateMismatch {
            a: x.sample_rate,
            b: h.sample_rate,
        });
    }
    let n = x.len();
    let mut y = vec![0.0; n];
    for (k, &hk) in h.taps.iter().enumerate() {
        if k >= n {
            break;
        }
        if hk == 0.0 {
            continue;
        }
        for i in k..n {
            y[i] += hk * x.samples[i - k];
        }
    }
    Ok(Waveform::new(y, x.sample_rate))
}

// ---------------------------------------------------------------------------
// FFT and framing
// ---------------------------------------------------------------------------

/// In-place iterative radix-2 FFT. Lengths must be powers of two.
fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -std::f64::consts::TAU / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

fn hamming(n: usize, len: usize) -> f64 {
    0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / (len as f64 - 1.0)).cos()
}

fn num_frames(len: usize) -> Result<usize, AudioError> {
    if len < FRAME_LEN {
        return Err(AudioError::TooShort {
            len,
            need: FRAME_LEN,
        });
    }
    Ok(1 + (len - FRAME_LEN) / FRAME_SHIFT)
}

/// Hamming-windowed power spectrum (129 bins) of each 25 ms / 10 ms frame.
fn power_frames(samples: &[f64]) -> Result<Vec<[f64; NUM_BINS]>, AudioError> {
    let frames = num_frames(samples.len())?;
    let mut out = Vec::with_capacity(frames);
    let mut re = [0.0f64; FFT_SIZE];
    let mut im = [0.0f64; FFT_SIZE];
    for f in 0..frames {
        let start = f * FRAME_SHIFT;
        re.fill(0.0);
        im.fill(0.0);
        for n in 0..FRAME_LEN {
            re[n] = samples[start + n] * hamming(n, FRAME_LEN);
        }
        fft(&mut re, &mut im);
        let mut power = [0.0f64; NUM_BINS];
        for (k, p) in power.iter_mut().enumerate() {
            *p = re[k] * re[k] + im[k] * im[k];
        }
        out.push(power);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Objective quality measures
// ---------------------------------------------------------------------------

/// Least-squares scale-compensated SNR in dB; +inf when the residual is zero.
pub fn snr_db(reference: &Waveform, degraded: &Waveform) -> Result<f64, AudioError> {
    if reference.sample_rate != degraded.sample_rate {
        return Err(AudioError::SampleRateMismatch {
            a: reference.sample_rate,
            b: degraded.sample_rate,
        });
    }
    if reference.len() != degraded.len() {
        return Err(AudioError::LengthMismatch {
            a: reference.len(),
            b: degraded.len(),
        });
    }
    let ref_energy: f64 = reference.samples.iter().map(|x| x * x).sum();
    if ref_energy == 0.0 {
        return Err(AudioError::ZeroEnergyRef);
    }
    let cross: f64 = reference
        .samples
        .iter()
        .zip(&degraded.samples)
        .map(|(r, d)| r * d)
        .sum();
    let scale = cross / ref_energy;
    let signal = scale * scale * ref_energy;
    let residual: f64 = reference
        .samples
        .iter()
        .zip(&degraded.samples)
        .map(|(r, d)| {
            let e = d - scale * r;
            e * e
        })
        .sum();
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / residual).log10())
}

/// Mean over frames and bins of (r - ln r - 1) with r = P_ref / P_deg,
/// power spectra floored at 1e-10. Not symmetrized.
pub fn itakura_saito(reference: &Waveform, degraded: &Waveform) -> Result<f64, AudioError> {
    check_pair(reference, degraded)?;
    let ref_frames = power_frames(&reference.samples)?;
    let deg_frames = power_frames(&degraded.samples)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pr, pd) in ref_frames.iter().zip(&deg_frames) {
        for (r_bin, d_bin) in pr.iter().zip(pd) {
            let r = r_bin.max(POWER_FLOOR) / d_bin.max(POWER_FLOOR);
            total += r - r.ln() - 1.0;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Real cepstrum coefficients c_1..c_16 of one frame's floored log power
/// spectrum (the 129 one-sided bins extended symmetrically to 256).
fn cepstrum_16(power: &[f64; NUM_BINS]) -> [f64; CD_COEFFS] {
    let log_p: Vec<f64> = power.iter().map(|p| p.max(POWER_FLOOR).ln()).collect();
    let mut c = [0.0f64; CD_COEFFS];
    let n = FFT_SIZE as f64;
    for (i, ck) in c.iter_mut().enumerate() {
        let k = (i + 1) as f64;
        // c_k = (1/N) sum_j L[j] cos(2 pi j k / N) over the symmetric spectrum.
        let mut acc = log_p[0] + log_p[NUM_BINS - 1] * (std::f64::consts::PI * k).cos();
        for (j, lp) in log_p.iter().enumerate().take(NUM_BINS - 1).skip(1) {
            acc += 2.0 * lp * (std::f64::consts::TAU * j as f64 * k / n).cos();
        }
        *ck = acc / n;
    }
    c
}

/// (10/ln 10) * sqrt(2 * sum_{k=1..16} (c_k_ref - c_k_deg)^2), averaged over
/// frames. c0 is excluded, so pure gains measure zero.
pub fn cepstral_distance(reference: &Waveform, degraded: &Waveform) -> Result<f64, AudioError> {
    check_pair(reference, degraded)?;
    let ref_frames = power_frames(&reference.samples)?;
    let deg_frames = power_frames(&degraded.samples)?;
    let mut total = 0.0;
    for (pr, pd) in ref_frames.iter().zip(&deg_frames) {
        let cr = cepstrum_16(pr);
        let cd = cepstrum_16(pd);
        let sq: f64 = cr.iter().zip(&cd).map(|(a, b)| (a - b) * (a - b)).sum();
        total += (10.0 / std::f64::consts::LN_10) * (2.0 * sq).sqrt();
    }
    Ok(total / ref_frames.len() as f64)
}

fn check_pair(a: &Waveform, b: &Waveform) -> Result<(), AudioError> {
    if a.sample_rate != b.sample_rate {
        return Err(AudioError::SampleRateMismatch {
            a: a.sample_rate,
            b: b.sample_rate,
        });
    }
    if a.sample_rate != SAMPLE_RATE {
        return Err(AudioError::UnsupportedRate(a.sample_rate));
    }
    if a.len() != b.len() {
        return Err(AudioError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Log-mel features and CMVN
// ---------------------------------------------------------------------------

/// Frames x 40 feature matrix on the 10 ms grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    frames: usize,
    pub cmvn_applied: bool,
}

impl FeatureSequence {
    /// Wraps precomputed 40-d rows (row-major, `frames * 40` values).
    pub fn from_rows(data: Vec<f64>, frames: usize) -> FeatureSequence {
        assert_eq!(data.len(), frames * NUM_MELS, "feature row count mismatch");
        FeatureSequence {
            data,
            frames,
            cmvn_applied: false,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        NUM_MELS
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * NUM_MELS..(i + 1) * NUM_MELS]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn mel_of_hz(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn hz_of_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// 40 triangular filters over [0, 4000] Hz, equally spaced on the mel scale,
/// evaluated at the 129 bin frequencies. Rows are filters.
pub fn mel_filterbank() -> Vec<[f64; NUM_BINS]> {
    let f_max = SAMPLE_RATE as f64 / 2.0;
    let m_max = mel_of_hz(f_max);
    let centers: Vec<f64> = (0..NUM_MELS + 2)
        .map(|i| hz_of_mel(m_max * i as f64 / (NUM_MELS + 1) as f64))
        .collect();
    let mut bank = Vec::with_capacity(NUM_MELS);
    for m in 1..=NUM_MELS {
        let (left, center, right) = (centers[m - 1], centers[m], centers[m + 1]);
        let mut row = [0.0f64; NUM_BINS];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
            if f > left && f < center {
                *w = (f - left) / (center - left);
            } else if (f - center).abs() < 1e-12 {
                *w = 1.0;
            } else if f > center && f < right {
                *w = (right - f) / (right - center);
            }
        }
        bank.push(row);
    }
    bank
}

/// 40-d log-mel features: pre-emphasis 0.97, 25 ms Hamming frames at 10 ms
/// shift, 256-point power spectrum, triangular mel filters, log floored at
/// 1e-10. Input must be 8 kHz.
pub fn melfb(x: &Waveform) -> Result<FeatureSequence, AudioError> {
    if x.sample_rate != SAMPLE_RATE {
        return Err(AudioError::UnsupportedRate(x.sample_rate));
    }
    let mut emphasized = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for &s in &x.samples {
        emphasized.push(s - PREEMPHASIS * prev);
        prev = s;
    }
    let power = power_frames(&emphasized)?;
    let bank = mel_filterbank();
    let mut data = Vec::with_capacity(power.len() * NUM_MELS);
    for frame in &power {
        for filter in &bank {
            let e: f64 = filter.iter().zip(frame).map(|(w, p)| w * p).sum();
            data.push(e.max(POWER_FLOOR).ln());
        }
    }
    Ok(FeatureSequence {
        frames: power.len(),
        data,
        cmvn_applied: false,
    })
}

/// Per-dimension mean subtraction and variance normalization (population
/// statistics; std floored at 1e-8).
pub fn cmvn(features: &FeatureSequence) -> FeatureSequence {
    let frames = features.frames;
    let mut mean = [0.0f64; NUM_MELS];
    for f in 0..frames {
        for (m, v) in mean.iter_mut().zip(features.frame(f)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= frames as f64);
    let mut var = [0.0f64; NUM_MELS];
    for f in 0..frames {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(features.frame(f)) {
            let d = x - m;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= frames as f64);
    let mut data = Vec::with_capacity(features.data.len());
    for f in 0..frames {
        for ((x, m), v) in features.frame(f).iter().zip(&mean).zip(&var) {
            data.push((x - m) / v.sqrt().max(CMVN_STD_FLOOR));
        }
    }
    FeatureSequence {
        data,
        frames,
        cmvn_applied: true,
    }
}

// ---------------------------------------------------------------------------
// Audio file I/O: 16-bit mono PCM RIFF and raw float64 with a length header
// ---------------------------------------------------------------------------

pub fn write_wav(path: &Path, wav: &Waveform) -> Result<(), AudioError> {
    let n = wav.len() as u32;
    let data_len = n * 2;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wav.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wav.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wav.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform, AudioError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::Wav("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12usize;
    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = bytes
            .get(pos + 8..pos + 8 + size)
            .ok_or_else(|| AudioError::Wav("truncated chunk".into()))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Wav("short fmt chunk".into()));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(AudioError::Wav(format!(
                        "need mono 16-bit PCM, got format={format} channels={channels} bits={bits}"
                    )));
                }
                sample_rate = Some(rate);
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let (Some(rate), Some(body)) = (sample_rate, data) else {
        return Err(AudioError::Wav("missing fmt or data chunk".into()));
    };
    let samples = body
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
        .collect();
    Ok(Waveform::new(samples, rate))
}

/// Raw float64: u64 little-endian sample count, then the samples.
pub fn write_raw64(path: &Path, wav: &Waveform) -> Result<(), AudioError> {
    let mut out = Vec::with_capacity(8 + wav.len() * 8);
    out.extend_from_slice(&(wav.len() as u64).to_le_bytes());
    for &s in &wav.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_raw64(path: &Path, sample_rate: u32) -> Result<Waveform, AudioError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(AudioError::Wav("raw64 file shorter than its header".into()));
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n * 8 {
        return Err(AudioError::Wav(format!(
            "raw64 length header says {n} samples but file has {} payload bytes",
            bytes.len() - 8
        )));
    }
    let samples = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Waveform::new(samples, sample_rate))
}

/// Reads a waveform by extension: `.wav` as RIFF PCM16, anything else as
/// raw float64.
pub fn read_audio(path: &Path, sample_rate: u32) -> Result<Waveform, AudioError> {
    if path.extension().is_some_and(|e| e == "wav") {
        read_wav(path)
    } else {
        read_raw64(path, sample_rate)
    }
}
