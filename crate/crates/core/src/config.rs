//! Run configuration: a nested TOML document with `--set key=value` overrides.

use serde::{Deserialize, Serialize};

use crate::dataset::ToyRecipe;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub sampling: SamplingConfig,
    pub metrics: MetricsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub schedule: ScheduleKind,
    /// Linear schedule endpoints, quoted for `T = 1000` and rescaled by `1000 / T`.
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub d_speech: usize,
    pub d_motion: usize,
    pub d_id: usize,
    pub d_emo: usize,
    pub n_identities: usize,
    pub n_emotions: usize,
    pub n_specific_layers: usize,
    pub m_shared_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Relative position offsets beyond this distance share one bias.
    pub rel_max_offset: usize,
    /// Width of the sinusoidal step embedding.
    pub time_embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub fps: f64,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_fft: usize,
    /// Filters in the bank feeding MFCC, onset and the learned stub.
    pub n_mels: usize,
    pub mfcc_dim: usize,
    pub mel_dim: usize,
    pub prosody_dim: usize,
    pub onset_dim: usize,
    pub learned_stub_dim: usize,
    pub stub_seed: u64,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub text_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_clips: usize,
    pub recipe: ToyRecipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub style_mask_prob: f64,
    /// Probability of also masking the speech condition (ablation variant).
    pub speech_mask_prob: f64,
    pub lambda_vel: f64,
    pub lambda_acc: f64,
    pub huber_delta: f64,
    pub clip_max_frames: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub omega: f64,
    pub overlap_frames: usize,
    pub clip_len: usize,
    /// Also mask the speech condition in the unguided branch.
    pub mask_speech_unconditional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Frames on each side of the centre frame seen by the encoder.
    pub context_frames: usize,
    pub ae_steps: usize,
    pub ae_lr: f64,
    pub ae_batch: usize,
    pub srgr_delta: f64,
    pub beat_sigma_seconds: f64,
    pub diversity_pairs: usize,
    /// Length of the evaluation windows cut from reference and generated motion.
    pub eval_window_frames: usize,
    /// Cap on evaluation windows drawn from a split.
    pub eval_max_windows: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            diffusion: DiffusionConfig::default(),
            model: ModelConfig::default(),
            features: FeatureConfig::default(),
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            sampling: SamplingConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 1000, schedule: ScheduleKind::Linear, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 8,
            d_speech: 32,
            d_motion: 64,
            d_id: 8,
            d_emo: 8,
            n_identities: 4,
            n_emotions: 4,
            n_specific_layers: 4,
            m_shared_layers: 2,
            heads: 4,
            ff_mult: 4,
            rel_max_offset: 64,
            time_embed_dim: 64,
        }
    }
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fps: 30.0,
            hop_length: 160,
            win_length: 400,
            n_fft: 512,
            n_mels: 40,
            mfcc_dim: 13,
            mel_dim: 4,
            prosody_dim: 2,
            onset_dim: 1,
            learned_stub_dim: 4,
            stub_seed: 17,
            text_dim: 8,
            vocab_size: 64,
            text_seed: 23,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_clips: 200, recipe: ToyRecipe::default() }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            steps: 2000,
            style_mask_prob: 0.1,
            speech_mask_prob: 0.0,
            lambda_vel: 0.1,
            lambda_acc: 0.01,
            huber_delta: 1.0,
            clip_max_frames: 300,
            grad_clip: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { omega: 3.0, overlap_frames: 30, clip_len: 300, mask_speech_unconditional: false }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden_dim: 128,
            context_frames: 2,
            ae_steps: 1500,
            ae_lr: 2e-3,
            ae_batch: 256,
            srgr_delta: 0.2,
            beat_sigma_seconds: 0.1,
            diversity_pairs: 100,
            eval_window_frames: 60,
            eval_max_windows: 64,
        }
    }
}

impl FeatureConfig {
    /// Audio feature width `D_a`.
    pub fn d_audio(&self) -> usize {
        self.mfcc_dim + self.mel_dim + self.prosody_dim + self.onset_dim + self.learned_stub_dim
    }

    /// Speech feature width `D_a + D_e`.
    pub fn d_speech_input(&self) -> usize {
        self.d_audio() + self.text_dim
    }
}

impl Config {
    /// Dimensions and regimen at the scale of the original benchmark. Only
    /// the numbers differ; the code paths are the same as the desk defaults.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.model.joints = 61;
        c.model.d_speech = 96;
        c.model.d_motion = 384;
        c.model.time_embed_dim = 384;
        c.model.n_identities = 30;
        c.model.n_emotions = 8;
        c.features.mel_dim = 128;
        c.features.learned_stub_dim = 989;
        c.features.text_dim = 301;
        c.training.batch_size = 150;
        c.training.steps = 120_000;
        c.metrics.diversity_pairs = 500;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `section.key=value`; the value is parsed as a TOML literal and
    /// falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}` does not name a config entry")))?;
            let slot = table.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            if i + 1 == parts.len() {
                // Integers are accepted where floats are expected.
                *slot = match (&*slot, value) {
                    (toml::Value::Float(_), toml::Value::Integer(v)) => toml::Value::Float(v as f64),
                    (_, v) => v,
                };
                break;
            }
            node = slot;
        }
        let updated: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let d = &self.diffusion;
        if d.steps < 1 {
            bad.push("diffusion.steps must be at least 1".to_string());
        }
        if !(d.beta_start > 0.0 && d.beta_end >= d.beta_start && d.beta_end < 1.0) {
            bad.push("diffusion betas must satisfy 0 < beta_start <= beta_end < 1".to_string());
        }
        let m = &self.model;
        for (name, v) in [
            ("model.joints", m.joints),
            ("model.d_speech", m.d_speech),
            ("model.d_motion", m.d_motion),
            ("model.d_id", m.d_id),
            ("model.d_emo", m.d_emo),
            ("model.n_identities", m.n_identities),
            ("model.n_emotions", m.n_emotions),
            ("model.heads", m.heads),
            ("model.ff_mult", m.ff_mult),
            ("model.time_embed_dim", m.time_embed_dim),
            ("features.text_dim", self.features.text_dim),
            ("features.vocab_size", self.features.vocab_size),
            ("features.d_audio", self.features.d_audio()),
            ("metrics.latent_dim", self.metrics.latent_dim),
            ("metrics.hidden_dim", self.metrics.hidden_dim),
        ] {
            if v < 1 {
                bad.push(format!("{name} must be at least 1"));
            }
        }
        if m.heads >= 1 && (m.d_speech % m.heads != 0 || m.d_motion % m.heads != 0) {
            bad.push("model.heads must divide d_speech and d_motion".to_string());
        }
        if m.time_embed_dim % 2 != 0 {
            bad.push("model.time_embed_dim must be even".to_string());
        }
        let f = &self.features;
        if f.sample_rate == 0 || f.hop_length == 0 || f.win_length == 0 || f.win_length > f.n_fft {
            bad.push("features need positive rate and hop, and win_length <= n_fft".to_string());
        }
        if f.mfcc_dim > f.n_mels {
            bad.push("features.mfcc_dim cannot exceed n_mels".to_string());
        }
        if f.prosody_dim != 0 && f.prosody_dim != 2 {
            bad.push("features.prosody_dim is 0 or 2 (log-energy, zero-crossing rate)".to_string());
        }
        if f.onset_dim > 1 {
            bad.push("features.onset_dim is 0 or 1".to_string());
        }
        if !(f.fps > 0.0) {
            bad.push("features.fps must be positive".to_string());
        }
        let t = &self.training;
        for (name, p) in [("style_mask_prob", t.style_mask_prob), ("speech_mask_prob", t.speech_mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("training.{name} must lie in [0, 1]"));
            }
        }
        if !(t.lr > 0.0) || t.batch_size < 1 || !(t.huber_delta > 0.0) {
            bad.push("training needs lr > 0, batch_size >= 1 and huber_delta > 0".to_string());
        }
        if t.lambda_vel < 0.0 || t.lambda_acc < 0.0 || t.grad_clip < 0.0 {
            bad.push("training loss weights and grad_clip must be non-negative".to_string());
        }
        if self.sampling.overlap_frames >= t.clip_max_frames {
            bad.push("sampling.overlap_frames must be below training.clip_max_frames".to_string());
        }
        if self.sampling.overlap_frames >= self.sampling.clip_len {
            bad.push("sampling.overlap_frames must be below sampling.clip_len".to_string());
        }
        if !self.sampling.omega.is_finite() {
            bad.push("sampling.omega must be finite".to_string());
        }
        let mt = &self.metrics;
        if !(mt.srgr_delta > 0.0) || !(mt.beat_sigma_seconds > 0.0) || mt.diversity_pairs < 1 {
            bad.push("metrics need srgr_delta > 0, beat_sigma_seconds > 0, diversity_pairs >= 1".to_string());
        }
        if mt.eval_window_frames < 1 || mt.eval_max_windows < 2 {
            bad.push("metrics need eval_window_frames >= 1 and eval_max_windows >= 2".to_string());
        }
        if let Err(e) = self.data.recipe.validate(m.joints) {
            bad.push(e.to_string());
        }
        if self.data.recipe.n_identities != m.n_identities || self.data.recipe.n_emotions != m.n_emotions {
            bad.push("data.recipe identity/emotion counts must match the model vocabulary".to_string());
        }
        if self.data.recipe.vocab_size > f.vocab_size {
            bad.push("data.recipe.vocab_size exceeds features.vocab_size".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}
