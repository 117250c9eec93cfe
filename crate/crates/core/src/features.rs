//! Deterministic speech features: audio descriptors from the waveform, seeded
//! transcript embeddings, resampling to the motion frame rate and assembly.

use std::path::Path;

use cospeech_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::config::FeatureConfig;
use crate::error::{Error, Result};
use crate::types::SpeechFeatureSequence;

/// Floor added to filterbank energies before taking logs.
const LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let data_err = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
        let mut reader = hound::WavReader::open(path).map_err(|e| data_err(e.to_string()))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(data_err(format!("expected mono 16-bit PCM, found {} channel(s) at {} bits", spec.channels, spec.bits_per_sample)));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| data_err(e.to_string()))?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes a mono 16-bit PCM WAV file; samples are clipped to [-1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec =
            hound::WavSpec { channels: 1, sample_rate: self.sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let io_err = |e: hound::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(io_err)?;
        }
        writer.finalize().map_err(io_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Descriptor {
    Mfcc,
    MelSpectrogram,
    Prosody,
    OnsetStrength,
    LearnedStub,
}

/// Ordered descriptor blocks and the framing shared by all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSpec {
    pub descriptors: Vec<(Descriptor, usize)>,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub stub_seed: u64,
}

impl AudioFeatureSpec {
    pub fn from_config(c: &FeatureConfig) -> Self {
        let descriptors = [
            (Descriptor::Mfcc, c.mfcc_dim),
            (Descriptor::MelSpectrogram, c.mel_dim),
            (Descriptor::Prosody, c.prosody_dim),
            (Descriptor::OnsetStrength, c.onset_dim),
            (Descriptor::LearnedStub, c.learned_stub_dim),
        ]
        .into_iter()
        .filter(|&(_, d)| d > 0)
        .collect();
        Self { descriptors, hop_length: c.hop_length, win_length: c.win_length, n_fft: c.n_fft, n_mels: c.n_mels, stub_seed: c.stub_seed }
    }

    pub fn dim(&self) -> usize {
        self.descriptors.iter().map(|&(_, d)| d).sum()
    }

    /// Offset of the first column of `kind`, if enabled.
    pub fn column_of(&self, kind: Descriptor) -> Option<usize> {
        let mut off = 0;
        for &(k, d) in &self.descriptors {
            if k == kind {
                return Some(off);
            }
            off += d;
        }
        None
    }

    fn check(&self) -> Result<()> {
        if self.hop_length == 0 || self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::Invalid("feature framing needs hop > 0 and 0 < win <= n_fft".into()));
        }
        for &(k, d) in &self.descriptors {
            let ok = match k {
                Descriptor::Mfcc => d <= self.n_mels,
                Descriptor::Prosody => d == 2,
                Descriptor::OnsetStrength => d == 1,
                Descriptor::MelSpectrogram | Descriptor::LearnedStub => d >= 1,
            };
            if !ok {
                return Err(Error::Invalid(format!("descriptor {k:?} cannot have {d} columns")));
            }
        }
        Ok(())
    }
}

/// Triangular filters on the HTK mel scale spanning 0 Hz to Nyquist, one row
/// per band over the `n_fft / 2 + 1` power-spectrum bins.
pub fn mel_filterbank(n_bands: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let hz_to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let mel_to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_bands + 2).map(|i| mel_to_hz(top * i as f64 / (n_bands + 1) as f64)).collect();
    (0..n_bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Number of analysis frames, `ceil(len / hop)`.
pub fn frame_count(n_samples: usize, hop: usize) -> usize {
    n_samples.div_ceil(hop)
}

/// Raw (unwindowed) samples of frame `i`, zero-padded past the end of the signal.
pub fn raw_frame(samples: &[f32], i: usize, spec: &AudioFeatureSpec) -> Vec<f64> {
    let start = i * spec.hop_length;
    (0..spec.win_length).map(|k| samples.get(start + k).map_or(0.0, |&v| v as f64)).collect()
}

/// Periodic Hann window of `len` samples.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len).map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / len as f64).cos()).collect()
}

fn apply_bank(bank: &[Vec<f64>], power: &[f64]) -> Vec<f64> {
    bank.iter().map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum()).collect()
}

fn log_energies(e: &[f64]) -> Vec<f64> {
    e.iter().map(|v| (v + LOG_FLOOR).ln()).collect()
}

/// Orthonormal DCT-II coefficients `0..n_out` of `x`.
fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x.iter().enumerate().map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()).sum();
            s * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
        })
        .collect()
}

/// Fixed projection standing in for a pretrained speech encoder.
fn stub_projection(n_mels: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n_mels as f64).sqrt();
    (0..n_mels * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect::<Vec<f64>>()
}

/// Frame-level audio descriptors, `[ceil(len / hop) x spec.dim()]`.
pub fn extract_audio_features(wave: &Waveform, spec: &AudioFeatureSpec) -> Result<Tensor<f32>> {
    if wave.samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    spec.check()?;
    let n_frames = frame_count(wave.samples.len(), spec.hop_length);
    let n_bins = spec.n_fft / 2 + 1;
    let window = hann(spec.win_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(spec.n_fft);
    let bank = mel_filterbank(spec.n_mels, spec.n_fft, wave.sample_rate);
    let needs = |k: Descriptor| spec.descriptors.iter().any(|&(d, _)| d == k);
    let mel_bank = spec
        .descriptors
        .iter()
        .find(|&&(d, _)| d == Descriptor::MelSpectrogram)
        .map(|&(_, dim)| mel_filterbank(dim, spec.n_fft, wave.sample_rate));
    let stub = spec
        .descriptors
        .iter()
        .find(|&&(d, _)| d == Descriptor::LearnedStub)
        .map(|&(_, dim)| (dim, stub_projection(spec.n_mels, dim, spec.stub_seed)));
    let needs_bank = needs(Descriptor::Mfcc) || needs(Descriptor::OnsetStrength) || stub.is_some();

    let mut out = Tensor::zeros(n_frames, spec.dim());
    let mut buf = vec![Complex::new(0.0, 0.0); spec.n_fft];
    let mut prev_log_mel: Option<Vec<f64>> = None;
    for i in 0..n_frames {
        let raw = raw_frame(&wave.samples, i, spec);
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (k, (&x, &w)) in raw.iter().zip(&window).enumerate() {
            buf[k] = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        let log_mel = needs_bank.then(|| log_energies(&apply_bank(&bank, &power)));

        let row = out.row_mut(i);
        let mut col = 0;
        for &(kind, dim) in &spec.descriptors {
            let values: Vec<f64> = match kind {
                Descriptor::Mfcc => dct2(log_mel.as_ref().unwrap(), dim),
                Descriptor::MelSpectrogram => log_energies(&apply_bank(mel_bank.as_ref().unwrap(), &power)),
                Descriptor::Prosody => {
                    let energy: f64 = raw.iter().map(|v| v * v).sum();
                    let crossings = raw.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
                    vec![(energy + LOG_FLOOR).ln(), crossings as f64 / (raw.len() - 1).max(1) as f64]
                }
                Descriptor::OnsetStrength => {
                    let cur = log_mel.as_ref().unwrap();
                    let flux = match &prev_log_mel {
                        Some(prev) => cur.iter().zip(prev).map(|(c, p)| (c - p).max(0.0)).sum(),
                        None => 0.0,
                    };
                    vec![flux]
                }
                Descriptor::LearnedStub => {
                    let (d, w) = stub.as_ref().unwrap();
                    let lm = log_mel.as_ref().unwrap();
                    (0..*d).map(|j| lm.iter().enumerate().map(|(m, v)| v * w[m * d + j]).sum()).collect()
                }
            };
            for (k, v) in values.into_iter().enumerate() {
                row[col + k] = v as f32;
            }
            col += dim;
        }
        prev_log_mel = log_mel;
    }
    Ok(out)
}

/// Resamples `[T_a x D]` onto `n` rows by piecewise-linear interpolation with
/// both endpoints pinned.
pub fn align_to_motion_rate(feat: &Tensor<f32>, n: usize) -> Result<Tensor<f32>> {
    let ta = feat.rows();
    if ta < 2 {
        return Err(Error::Invalid(format!("need at least 2 feature frames to resample, got {ta}")));
    }
    if n < 1 {
        return Err(Error::Invalid("target frame count must be at least 1".into()));
    }
    let mut out = Tensor::zeros(n, feat.cols());
    for i in 0..n {
        let p = if n == 1 { 0.0 } else { (i as f64 * (ta - 1) as f64) / (n - 1) as f64 };
        let lo = (p.floor() as usize).min(ta - 1);
        let hi = (lo + 1).min(ta - 1);
        let w = p - lo as f64;
        let (a, b) = (feat.row(lo), feat.row(hi));
        for (c, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = ((1.0 - w) * a[c] as f64 + w * b[c] as f64) as f32;
        }
    }
    Ok(out)
}

/// Seeded lookup table replacing pretrained word vectors. Token 0 is silence.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEmbedder {
    table: Tensor<f32>,
}

impl TranscriptEmbedder {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Tensor::from_fn(vocab_size, dim, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        });
        Self { table }
    }

    pub fn from_config(c: &FeatureConfig) -> Self {
        Self::new(c.vocab_size, c.text_dim, c.text_seed)
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    /// One embedding row per frame token.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        let mut out = Tensor::zeros(tokens.len(), self.dim());
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.vocab_size() {
                return Err(Error::UnknownToken(t));
            }
            out.row_mut(i).copy_from_slice(self.table.row(t as usize));
        }
        Ok(out)
    }
}

/// Per-frame embedding of an aligned token sequence.
pub fn embed_transcript_stub(tokens: &[u32], embedder: &TranscriptEmbedder) -> Result<Tensor<f32>> {
    embedder.embed(tokens)
}

/// Builds `s = [a ‖ e]` frame by frame.
pub fn assemble_speech(audio: &Tensor<f32>, transcript: &Tensor<f32>) -> Result<SpeechFeatureSequence> {
    if audio.rows() != transcript.rows() {
        return Err(Error::Shape(format!("audio has {} frames, transcript {}", audio.rows(), transcript.rows())));
    }
    let (da, de) = (audio.cols(), transcript.cols());
    let mut assembled = Tensor::zeros(audio.rows(), da + de);
    for r in 0..audio.rows() {
        let row = assembled.row_mut(r);
        row[..da].copy_from_slice(audio.row(r));
        row[da..].copy_from_slice(transcript.row(r));
    }
    Ok(SpeechFeatureSequence::from_parts(audio.clone(), transcript.clone(), assembled))
}

/// Onset peaks as times in seconds: local maxima of the onset envelope above
/// `mean + 0.5 std`, at least `min_gap` seconds apart (the stronger peak wins).
pub fn onset_peaks(onset: &[f32], frame_rate: f64, min_gap: f64) -> Vec<f64> {
    let n = onset.len();
    if n < 3 {
        return Vec::new();
    }
    let mean = onset.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = onset.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let threshold = mean + 0.5 * var.sqrt();
    let mut peaks: Vec<(usize, f64)> = Vec::new();
    for i in 1..n - 1 {
        let v = onset[i] as f64;
        if v > 0.0 && v > threshold && v > onset[i - 1] as f64 && v >= onset[i + 1] as f64 {
            match peaks.last_mut() {
                Some(last) if (i - last.0) as f64 / frame_rate < min_gap => {
                    if v > last.1 {
                        *last = (i, v);
                    }
                }
                _ => peaks.push((i, v)),
            }
        }
    }
    peaks.into_iter().map(|(i, _)| i as f64 / frame_rate).collect()
}

/// Audio descriptors, transcript embedder and frame-rate alignment bundled
/// for turning a waveform plus frame tokens into speech features.
#[derive(Debug, Clone)]
pub struct SpeechFeaturizer {
    pub spec: AudioFeatureSpec,
    pub embedder: TranscriptEmbedder,
}

impl SpeechFeaturizer {
    pub fn from_config(c: &FeatureConfig) -> Self {
        Self { spec: AudioFeatureSpec::from_config(c), embedder: TranscriptEmbedder::from_config(c) }
    }

    pub fn d_audio(&self) -> usize {
        self.spec.dim()
    }

    pub fn d_text(&self) -> usize {
        self.embedder.dim()
    }

    /// Speech features for `tokens.len()` motion frames. Returns the features
    /// and the raw audio descriptor matrix at the analysis rate.
    pub fn featurize(&self, wave: &Waveform, tokens: &[u32]) -> Result<(SpeechFeatureSequence, Tensor<f32>)> {
        let raw = extract_audio_features(wave, &self.spec)?;
        let padded;
        let src = if raw.rows() < 2 {
            padded = Tensor::vstack(&[&raw, &raw])?;
            &padded
        } else {
            &raw
        };
        let audio = align_to_motion_rate(src, tokens.len())?;
        let text = self.embedder.embed(tokens)?;
        Ok((assemble_speech(&audio, &text)?, raw))
    }

    /// Audio beat times from the onset column of `raw` descriptors.
    pub fn audio_beats(&self, raw: &Tensor<f32>, sample_rate: u32) -> Vec<f64> {
        match self.spec.column_of(Descriptor::OnsetStrength) {
            Some(c) => {
                let onset: Vec<f32> = (0..raw.rows()).map(|r| raw.get(r, c)).collect();
                onset_peaks(&onset, sample_rate as f64 / self.spec.hop_length as f64, 0.1)
            }
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(descriptors: Vec<(Descriptor, usize)>) -> AudioFeatureSpec {
        AudioFeatureSpec { descriptors, hop_length: 160, win_length: 400, n_fft: 512, n_mels: 40, stub_seed: 5 }
    }

    fn tone(freq: f64, seconds: f64) -> Waveform {
        let n = (16000.0 * seconds) as usize;
        let samples = (0..n).map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32).collect();
        Waveform::new(samples, 16000).unwrap()
    }

    #[test]
    fn default_layout_has_24_columns() {
        let spec = AudioFeatureSpec::from_config(&FeatureConfig::default());
        assert_eq!(spec.dim(), 24);
        assert_eq!(spec.column_of(Descriptor::OnsetStrength), Some(19));
    }

    #[test]
    fn frame_count_is_ceiling() {
        let spec = AudioFeatureSpec::from_config(&FeatureConfig::default());
        let w = Waveform::new(vec![0.1; 1601], 16000).unwrap();
        assert_eq!(extract_audio_features(&w, &spec).unwrap().rows(), 11);
    }

    #[test]
    fn empty_audio_is_rejected() {
        let spec = AudioFeatureSpec::from_config(&FeatureConfig::default());
        let w = Waveform::new(vec![], 16000).unwrap();
        assert!(matches!(extract_audio_features(&w, &spec), Err(Error::EmptyAudio)));
    }

    #[test]
    fn silence_has_no_onsets() {
        let spec = AudioFeatureSpec::from_config(&FeatureConfig::default());
        let w = Waveform::new(vec![0.0; 8000], 16000).unwrap();
        let f = extract_audio_features(&w, &spec).unwrap();
        let c = spec.column_of(Descriptor::OnsetStrength).unwrap();
        assert!((0..f.rows()).all(|r| f.get(r, c) == 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let spec = AudioFeatureSpec::from_config(&FeatureConfig::default());
        let w = tone(230.0, 0.3);
        assert_eq!(extract_audio_features(&w, &spec).unwrap(), extract_audio_features(&w.clone(), &spec).unwrap());
    }

    /// Direct O(n^2) DFT of each windowed frame, filtered by the same bank.
    #[test]
    fn tone_peaks_in_the_band_covering_its_frequency() {
        let spec = spec_with(vec![(Descriptor::MelSpectrogram, 40)]);
        let w = tone(440.0, 0.2);
        let feats = extract_audio_features(&w, &spec).unwrap();
        let bank = mel_filterbank(40, 512, 16000);
        let window = hann(400);
        let bin_440: f64 = 440.0 * 512.0 / 16000.0;
        for i in 2..feats.rows() - 4 {
            let frame = raw_frame(w.samples(), i, &spec);
            let power: Vec<f64> = (0..257)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (n, (&x, &h)) in frame.iter().zip(&window).enumerate() {
                        let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / 512.0;
                        re += x * h * ang.cos();
                        im += x * h * ang.sin();
                    }
                    re * re + im * im
                })
                .collect();
            let energies = apply_bank(&bank, &power);
            let oracle = (0..40).max_by(|&a, &b| energies[a].total_cmp(&energies[b])).unwrap();
            let got = (0..40).max_by(|&a, &b| feats.get(i, a).total_cmp(&feats.get(i, b))).unwrap();
            assert_eq!(got, oracle, "frame {i}");
            // The winning triangle covers 440 Hz.
            let lo = bin_440.floor() as usize;
            assert!(bank[got][lo] > 0.0 || bank[got][lo + 1] > 0.0);
        }
    }

    #[test]
    fn mfcc_of_flat_log_spectrum_is_dc_only() {
        let c = dct2(&[2.0; 8], 4);
        assert!((c[0] - 2.0 * 8f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn interpolation_hand_case() {
        let f = Tensor::from_vec(2, 1, vec![0.0f32, 10.0]).unwrap();
        let out = align_to_motion_rate(&f, 3).unwrap();
        assert_eq!(out.data(), &[0.0, 5.0, 10.0]);
    }

    #[test]
    fn interpolation_identity_constant_and_errors() {
        let f = Tensor::from_fn(7, 3, |r, c| (r * 3 + c) as f32 * 0.37);
        assert_eq!(align_to_motion_rate(&f, 7).unwrap(), f);
        let k = Tensor::full(5, 2, 1.25f32);
        assert_eq!(align_to_motion_rate(&k, 13).unwrap(), Tensor::full(13, 2, 1.25f32));
        assert!(align_to_motion_rate(&Tensor::<f32>::zeros(1, 2), 4).is_err());
    }

    #[test]
    fn interpolation_keeps_endpoints_and_bounds() {
        let f = Tensor::from_fn(11, 2, |r, c| ((r as f32) * 1.7 + c as f32).sin());
        let out = align_to_motion_rate(&f, 29).unwrap();
        assert_eq!(out.row(0), f.row(0));
        assert_eq!(out.row(28), f.row(10));
        for c in 0..2 {
            let lo = (0..11).map(|r| f.get(r, c)).fold(f32::INFINITY, f32::min);
            let hi = (0..11).map(|r| f.get(r, c)).fold(f32::NEG_INFINITY, f32::max);
            assert!((0..29).all(|r| (lo..=hi).contains(&out.get(r, c))));
        }
    }

    #[test]
    fn transcript_lookup() {
        let e = TranscriptEmbedder::new(10, 4, 3);
        let silence = e.embed(&[0, 0, 0]).unwrap();
        assert!(silence.row(1) == silence.row(0) && silence.row(2) == silence.row(0));
        let t = embed_transcript_stub(&[3, 3, 7], &e).unwrap();
        assert_eq!(t.row(0), t.row(1));
        assert_ne!(t.row(0), t.row(2));
        assert!(matches!(e.embed(&[10]), Err(Error::UnknownToken(10))));
    }

    #[test]
    fn assembly_concatenates_and_slices_back() {
        let a = Tensor::from_vec(1, 2, vec![1.0f32, 2.0]).unwrap();
        let e = Tensor::from_vec(1, 1, vec![9.0f32]).unwrap();
        assert_eq!(assemble_speech(&a, &e).unwrap().assembled().data(), &[1.0, 2.0, 9.0]);
        let z = assemble_speech(&Tensor::zeros(3, 2), &Tensor::zeros(3, 4)).unwrap();
        assert!(z.assembled().data().iter().all(|&v| v == 0.0));
        let a = Tensor::from_fn(4, 3, |r, c| (r * 7 + c) as f32 * 0.13 - 0.5);
        let e = Tensor::from_fn(4, 2, |r, c| (r as f32 - c as f32).exp());
        let s = assemble_speech(&a, &e).unwrap();
        for r in 0..4 {
            assert_eq!(&s.assembled().row(r)[..3], a.row(r));
            assert_eq!(&s.assembled().row(r)[3..], e.row(r));
        }
        assert!(assemble_speech(&Tensor::zeros(3, 2), &Tensor::zeros(2, 1)).is_err());
    }

    #[test]
    fn onset_peaks_of_clicks() {
        let mut env = vec![0.0f32; 100];
        for &i in &[10usize, 40, 41, 80] {
            env[i] = 1.0;
        }
        env[41] = 0.8;
        let peaks = onset_peaks(&env, 100.0, 0.1);
        assert_eq!(peaks, vec![0.1, 0.4, 0.8]);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 0.999], 16000).unwrap();
        w.write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16000);
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
