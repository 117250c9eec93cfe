//! Synthetic corpus with controllable identity and emotion dependence, the
//! on-disk corpus format, splits and batch iteration.
//!
//! Clip file layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `CSMO` |
//! | 4     | u32 format version (1) |
//! | 4     | u32 frame count `N` |
//! | 4     | u32 joint count `J` |
//! | 4     | u32 audio width `D_a` |
//! | 4     | u32 transcript width `D_e` |
//! | 4     | u32 dtype code (1 = f32) |
//! | ...   | motion `N x J x 9`, audio `N x D_a`, transcript `N x D_e`, row-major f32 |

use std::path::{Path, PathBuf};

use cospeech_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::FeatureConfig;
use crate::error::{Error, Result};
use crate::features::{assemble_speech, SpeechFeaturizer, Waveform};
use crate::rotation::{cross3, dot3, log_map, normalize3, rodrigues};
use crate::types::{ClipRecord, MotionSequence, SpeechFeatureSequence, StyleLabel};
use crate::util::{mix_seed, sha256_hex};

pub const CLIP_MAGIC: &[u8; 4] = b"CSMO";
pub const CLIP_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 28;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Generator parameters for the synthetic corpus. Each joint's rotation vector is
/// `offset[id] * u_j + amplitude[emo] * env_emo(t − lag_j) * v_j + noise`,
/// where `env_emo` is the speech envelope low-passed at the emotion's cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRecipe {
    pub n_identities: usize,
    pub n_emotions: usize,
    pub joints: usize,
    /// Base rotation angle about each joint's rest axis, per identity.
    pub identity_offsets: Vec<f64>,
    /// Gesture amplitude per emotion.
    pub emotion_amplitudes: Vec<f64>,
    /// Envelope smoothing cutoff per emotion, in Hz.
    pub emotion_cutoffs_hz: Vec<f64>,
    /// Standard deviation of i.i.d. rotation-vector noise.
    pub noise_level: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: f64,
    /// Extra delay of joint `j` behind joint `j − 1`, in frames.
    pub joint_lag_frames: usize,
    /// Word ids are drawn from `1..vocab_size`; 0 marks silence.
    pub vocab_size: usize,
    /// RMS level mapped to a unit envelope.
    pub envelope_ref: f64,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        Self {
            n_identities: 4,
            n_emotions: 4,
            joints: 8,
            identity_offsets: vec![-0.6, -0.2, 0.2, 0.6],
            emotion_amplitudes: vec![0.15, 0.35, 0.6, 0.9],
            emotion_cutoffs_hz: vec![0.8, 1.4, 2.2, 3.2],
            noise_level: 0.01,
            min_frames: 150,
            max_frames: 450,
            fps: 30.0,
            joint_lag_frames: 2,
            vocab_size: 48,
            envelope_ref: 0.25,
        }
    }
}

impl ToyRecipe {
    pub fn validate(&self, joints: usize) -> Result<()> {
        let fail = |m: &str| Err(Error::Invalid(format!("toy recipe: {m}")));
        if self.joints != joints || joints == 0 {
            return fail("joint count must match the model and be positive");
        }
        if self.n_identities == 0 || self.identity_offsets.len() != self.n_identities {
            return fail("one base offset per identity is required");
        }
        if self.n_emotions == 0 || self.emotion_amplitudes.len() != self.n_emotions || self.emotion_cutoffs_hz.len() != self.n_emotions {
            return fail("one amplitude and one cutoff per emotion are required");
        }
        if !(self.noise_level >= 0.0) {
            return fail("noise level must be non-negative");
        }
        for (i, a) in self.identity_offsets.iter().enumerate() {
            for b in &self.identity_offsets[i + 1..] {
                if !((a - b).abs() > 10.0 * self.noise_level) {
                    return fail("identity offsets must differ by more than 10x the noise level");
                }
            }
        }
        for (i, a) in self.emotion_amplitudes.iter().enumerate() {
            if self.emotion_amplitudes[i + 1..].contains(a) {
                return fail("emotion amplitudes must be distinct");
            }
        }
        if self.emotion_cutoffs_hz.iter().any(|c| !(*c > 0.0)) {
            return fail("cutoffs must be positive");
        }
        if self.min_frames < 3 || self.max_frames < self.min_frames {
            return fail("clip lengths need 3 <= min_frames <= max_frames");
        }
        if !(self.fps > 0.0) || !(self.envelope_ref > 0.0) || self.vocab_size < 2 {
            return fail("fps and envelope_ref must be positive and vocab_size at least 2");
        }
        Ok(())
    }

    /// Rest axis `u_j` and gesture axis `v_j` of joint `j`; `u_j ⊥ v_j`.
    pub fn joint_axes(&self, j: usize) -> ([f64; 3], [f64; 3]) {
        let a = 2.0 * std::f64::consts::PI * j as f64 / self.joints as f64 + 0.3;
        let u = normalize3([a.cos(), a.sin(), 0.6]);
        let v = normalize3(cross3(u, [0.0, 0.0, 1.0]));
        (u, v)
    }

    /// Mean over frames and joints of the rotation angle about the rest axis.
    /// Without noise this equals the identity's base offset.
    pub fn mean_base_angle(&self, motion: &MotionSequence) -> f64 {
        let mut sum = 0.0;
        for n in 0..motion.len() {
            for j in 0..motion.joints() {
                sum += dot3(log_map(&motion.joint_block(n, j)), self.joint_axes(j).0);
            }
        }
        sum / (motion.len() * motion.joints()) as f64
    }
}

/// Speech-like bursts: harmonic carriers under raised-cosine syllable
/// envelopes separated by silences. Returns the waveform and one token per
/// motion frame (the burst's word id, or 0 in silence).
pub fn synth_speech(n_frames: usize, fps: f64, sample_rate: u32, vocab: usize, rng: &mut impl Rng) -> (Waveform, Vec<u32>) {
    let sr = sample_rate as f64;
    let duration = n_frames as f64 / fps;
    let n_samples = (duration * sr).round() as usize;
    let mut samples = vec![0.0f32; n_samples];
    let mut bursts = Vec::new();
    let mut t = rng.random_range(0.0..0.3);
    while t < duration {
        let dur = rng.random_range(0.12..0.4);
        let amp = rng.random_range(0.35..0.9);
        let f0 = rng.random_range(110.0..220.0);
        let word = rng.random_range(1..vocab as u32);
        let phases: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let norm: f64 = (1..=5).map(|h| 1.0 / h as f64).sum();
        let (s0, s1) = ((t * sr) as usize, (((t + dur) * sr) as usize).min(n_samples));
        for (k, out) in samples.iter_mut().enumerate().take(s1).skip(s0) {
            let tau = k as f64 / sr - t;
            let env = (std::f64::consts::PI * tau / dur).sin().powi(2);
            let carrier: f64 = (1..=5).map(|h| (std::f64::consts::TAU * h as f64 * f0 * tau + phases[h - 1]).sin() / h as f64).sum();
            *out = (amp * env * carrier / norm) as f32;
        }
        bursts.push((t, t + dur, word));
        t += dur + rng.random_range(0.08..0.45);
    }
    let tokens = (0..n_frames)
        .map(|n| {
            let c = (n as f64 + 0.5) / fps;
            bursts.iter().find(|b| b.0 <= c && c < b.1).map_or(0, |b| b.2)
        })
        .collect();
    (Waveform::new(samples, sample_rate).expect("synthesized samples are finite"), tokens)
}

/// Per-frame RMS of the waveform over each motion frame's sample span.
pub fn frame_rms(wave: &Waveform, n_frames: usize, fps: f64) -> Vec<f64> {
    let per = wave.sample_rate() as f64 / fps;
    let s = wave.samples();
    (0..n_frames)
        .map(|n| {
            let (a, b) = (((n as f64) * per) as usize, (((n + 1) as f64) * per) as usize);
            let (a, b) = (a.min(s.len()), b.min(s.len()));
            if b <= a {
                return 0.0;
            }
            (s[a..b].iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / (b - a) as f64).sqrt()
        })
        .collect()
}

/// Motion driven by the waveform's envelope under the given style.
pub fn toy_motion(recipe: &ToyRecipe, wave: &Waveform, n_frames: usize, style: StyleLabel, rng: &mut impl Rng) -> Result<MotionSequence> {
    style.check(recipe.n_identities, recipe.n_emotions)?;
    let rms = frame_rms(wave, n_frames, recipe.fps);
    let alpha = 1.0 - (-std::f64::consts::TAU * recipe.emotion_cutoffs_hz[style.emotion_id] / recipe.fps).exp();
    let mut smooth = Vec::with_capacity(n_frames);
    let mut y = 0.0;
    for r in rms {
        y += alpha * ((r / recipe.envelope_ref).min(1.5) - y);
        smooth.push(y);
    }
    let offset = recipe.identity_offsets[style.identity_id];
    let amp = recipe.emotion_amplitudes[style.emotion_id];
    let j_count = recipe.joints;
    let axes: Vec<_> = (0..j_count).map(|j| recipe.joint_axes(j)).collect();
    let mut frames = Tensor::zeros(n_frames, j_count * 9);
    for n in 0..n_frames {
        for (j, (u, v)) in axes.iter().enumerate() {
            let lag = j * recipe.joint_lag_frames;
            let e = if n >= lag { smooth[n - lag] } else { 0.0 };
            let mut r = [0.0; 3];
            for k in 0..3 {
                let noise: f64 =
                    if recipe.noise_level > 0.0 { recipe.noise_level * Distribution::<f64>::sample(&StandardNormal, rng) } else { 0.0 };
                r[k] = offset * u[k] + amp * e * v[k] + noise;
            }
            let m = rodrigues(r);
            for k in 0..9 {
                frames.set(n, j * 9 + k, m[k] as f32);
            }
        }
    }
    MotionSequence::new(frames, j_count, recipe.fps)
}

/// One generated clip with its audio beat times (seconds).
pub struct ToyClip {
    pub record: ClipRecord,
    pub audio_beats: Vec<f64>,
    pub waveform: Waveform,
}

/// Clip `index` of the corpus generated under `seed`. Styles cycle through
/// every (identity, emotion) cell so the corpus is balanced.
pub fn generate_clip(recipe: &ToyRecipe, featurizer: &SpeechFeaturizer, sample_rate: u32, index: usize, seed: u64) -> Result<ToyClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let style = StyleLabel::new(index % recipe.n_identities, (index / recipe.n_identities) % recipe.n_emotions);
    let n_frames = rng.random_range(recipe.min_frames..=recipe.max_frames);
    let (wave, tokens) = synth_speech(n_frames, recipe.fps, sample_rate, recipe.vocab_size, &mut rng);
    let motion = toy_motion(recipe, &wave, n_frames, style, &mut rng)?;
    let (speech, raw) = featurizer.featurize(&wave, &tokens)?;
    let audio_beats = featurizer.audio_beats(&raw, sample_rate);
    Ok(ToyClip { record: ClipRecord { clip_id: clip_id(index), motion, speech, style }, audio_beats, waveform: wave })
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// 70/10/20 split: clips are ranked by a seeded hash of their id and the
/// ranks are cut at rounded fractions, so counts are within one clip.
pub fn assign_splits(clip_ids: &[String], seed: u64) -> Vec<Split> {
    let key = |id: &str| {
        let h = sha256_hex(format!("{seed}:{id}").as_bytes());
        (u64::from_str_radix(&h[..16], 16).expect("hex digest"), id.to_string())
    };
    let mut order: Vec<usize> = (0..clip_ids.len()).collect();
    order.sort_by_cached_key(|&i| key(&clip_ids[i]));
    let n = clip_ids.len() as f64;
    let (train_end, val_end) = ((0.7 * n).round() as usize, (0.8 * n).round() as usize);
    let mut splits = vec![Split::Train; clip_ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train_end {
            Split::Train
        } else if rank < val_end {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    /// Path relative to the corpus root.
    pub file: String,
    pub split: Split,
    pub identity_id: usize,
    pub emotion_id: usize,
    pub frames: usize,
    pub sha256: String,
    /// Audio beat times in seconds.
    pub audio_beats: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub fps: f64,
    pub joints: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub features: FeatureConfig,
    pub recipe: Option<ToyRecipe>,
    pub clips: Vec<ClipEntry>,
}

impl CorpusManifest {
    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for e in &self.clips {
            c[e.split as usize] += 1;
        }
        c
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Serializes a clip record in the binary clip layout.
pub fn encode_clip(record: &ClipRecord) -> Vec<u8> {
    let m = record.motion.frames();
    let (a, e) = (record.speech.audio(), record.speech.transcript());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (m.len() + a.len() + e.len()));
    out.extend_from_slice(CLIP_MAGIC);
    for v in [CLIP_VERSION, m.rows() as u32, record.motion.joints() as u32, a.cols() as u32, e.cols() as u32, DTYPE_F32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in [m, a, e] {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the binary clip layout. Style and fps live in the manifest.
pub fn decode_clip(bytes: &[u8], clip_id: &str, style: StyleLabel, fps: f64) -> Result<ClipRecord> {
    let corrupt = |reason: String| Error::CorruptClip { clip: clip_id.to_string(), reason };
    if bytes.len() < HEADER_LEN || &bytes[..4] != CLIP_MAGIC {
        return Err(corrupt("bad magic or truncated header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, n, j, da, de, dtype) = (word(0), word(1), word(2), word(3), word(4), word(5));
    if version != CLIP_VERSION as usize || dtype != DTYPE_F32 as usize {
        return Err(corrupt(format!("unsupported version {version} or dtype {dtype}")));
    }
    let counts = [n * j * 9, n * da, n * de];
    let expected = HEADER_LEN + 4 * counts.iter().sum::<usize>();
    if bytes.len() != expected {
        return Err(corrupt(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut off = HEADER_LEN;
    let mut take = |count: usize| {
        let v: Vec<f32> = bytes[off..off + 4 * count].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        off += 4 * count;
        v
    };
    let motion = Tensor::from_vec(n, j * 9, take(counts[0]))?;
    let audio = Tensor::from_vec(n, da, take(counts[1]))?;
    let text = Tensor::from_vec(n, de, take(counts[2]))?;
    let motion = MotionSequence::new(motion, j, fps).map_err(|e| corrupt(e.to_string()))?;
    Ok(ClipRecord { clip_id: clip_id.to_string(), motion, speech: assemble_speech(&audio, &text)?, style })
}

pub fn write_clip(path: &Path, record: &ClipRecord) -> Result<String> {
    let bytes = encode_clip(record);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Generates `n_clips` clips under `root` and writes the manifest.
pub fn generate_toy_corpus(recipe: &ToyRecipe, features: &FeatureConfig, n_clips: usize, seed: u64, root: &Path) -> Result<CorpusManifest> {
    if n_clips < 10 {
        return Err(Error::Invalid(format!("corpus needs at least 10 clips, got {n_clips}")));
    }
    recipe.validate(recipe.joints)?;
    if (recipe.fps - features.fps).abs() > 0.0 {
        return Err(Error::Invalid("recipe fps must equal the feature fps".into()));
    }
    let featurizer = SpeechFeaturizer::from_config(features);
    let ids: Vec<String> = (0..n_clips).map(clip_id).collect();
    let splits = assign_splits(&ids, seed);
    let mut clips = Vec::with_capacity(n_clips);
    for (i, split) in splits.into_iter().enumerate() {
        let clip = generate_clip(recipe, &featurizer, features.sample_rate, i, seed)?;
        let file = format!("clips/{}.bin", ids[i]);
        let sha256 = write_clip(&root.join(&file), &clip.record)?;
        clips.push(ClipEntry {
            clip_id: ids[i].clone(),
            file,
            split,
            identity_id: clip.record.style.identity_id,
            emotion_id: clip.record.style.emotion_id,
            frames: clip.record.motion.len(),
            sha256,
            audio_beats: clip.audio_beats,
        });
    }
    let manifest = CorpusManifest {
        format_version: CLIP_VERSION,
        seed,
        fps: recipe.fps,
        joints: recipe.joints,
        d_audio: featurizer.d_audio(),
        d_text: featurizer.d_text(),
        features: features.clone(),
        recipe: Some(recipe.clone()),
        clips,
    };
    manifest.write(root)?;
    Ok(manifest)
}

/// A corpus held in memory; `clips[i]` corresponds to `manifest.clips[i]`.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    pub clips: Vec<ClipRecord>,
}

/// Reads the manifest and every clip, verifying checksums.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let manifest = CorpusManifest::read(root)?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let path = root.join(&entry.file);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::CorruptClip { clip: entry.clip_id.clone(), reason: format!("cannot read {}: {e}", path.display()) })?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::CorruptClip { clip: entry.clip_id.clone(), reason: "checksum mismatch".into() });
        }
        let style = StyleLabel::new(entry.identity_id, entry.emotion_id);
        let record = decode_clip(&bytes, &entry.clip_id, style, manifest.fps)?;
        if record.motion.joints() != manifest.joints
            || record.speech.d_audio() != manifest.d_audio
            || record.speech.d_text() != manifest.d_text
        {
            return Err(Error::CorruptClip { clip: entry.clip_id.clone(), reason: "dimensions disagree with the manifest".into() });
        }
        clips.push(record);
    }
    Ok(Corpus { root: root.to_path_buf(), manifest, clips })
}

impl Corpus {
    /// Indices of the clips in `split`, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.clips.len()).filter(|&i| self.manifest.clips[i].split == split).collect()
    }

    pub fn split_clips(&self, split: Split) -> Vec<&ClipRecord> {
        self.split_indices(split).into_iter().map(|i| &self.clips[i]).collect()
    }

    pub fn audio_beats(&self, index: usize) -> &[f64] {
        &self.manifest.clips[index].audio_beats
    }
}

/// `(start, len)` pieces of at most `max` frames covering `0..n`.
pub fn segment_bounds(n: usize, max: usize) -> Vec<(usize, usize)> {
    let max = max.max(1);
    (0..n).step_by(max).map(|s| (s, max.min(n - s))).collect()
}

pub fn segment_clip(record: &ClipRecord, start: usize, len: usize) -> ClipRecord {
    ClipRecord {
        clip_id: format!("{}@{start}", record.clip_id),
        motion: record.motion.slice(start, len),
        speech: record.speech.slice(start, len),
        style: record.style,
    }
}

/// Batches of clip segments of at most `max_frames` frames. Train order is
/// shuffled with `seed`; validation and test keep manifest order.
pub fn iterate_batches(corpus: &Corpus, split: Split, batch_size: usize, max_frames: usize, seed: u64) -> Result<Vec<Vec<ClipRecord>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let clips = corpus.split_clips(split);
    if clips.is_empty() {
        return Err(Error::Data(format!("split {split:?} has no clips")));
    }
    let mut segments: Vec<ClipRecord> = clips
        .iter()
        .flat_map(|c| segment_bounds(c.motion.len(), max_frames).into_iter().map(move |(s, l)| segment_clip(c, s, l)))
        .collect();
    if split == Split::Train {
        segments.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(segments.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Non-overlapping windows of exactly `len` frames, remainders dropped.
pub fn fixed_windows(clips: &[&ClipRecord], len: usize) -> Vec<ClipRecord> {
    clips.iter().flat_map(|c| (0..c.motion.len() / len.max(1)).map(move |k| segment_clip(c, k * len, len))).collect()
}

/// Speech features padded with zero rows or truncated to `n` frames.
pub fn fit_speech(speech: &SpeechFeatureSequence, n: usize) -> Result<SpeechFeatureSequence> {
    if speech.len() >= n {
        return Ok(speech.slice(0, n));
    }
    let pad = |t: &Tensor<f32>| Tensor::vstack(&[t, &Tensor::zeros(n - t.rows(), t.cols())]);
    assemble_speech(&pad(speech.audio())?, &pad(speech.transcript())?)
}
