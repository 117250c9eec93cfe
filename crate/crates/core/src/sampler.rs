//! Guided reverse diffusion: one batched denoising loop over many clips, and
//! arbitrary-length generation from overlapped clips joined by linear seams.

use std::path::{Path, PathBuf};

use cospeech_autograd::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SamplingConfig;
use crate::dataset::write_clip;
use crate::diffusion::{gaussian, reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fusion_net::{DenoiseBatch, DenoiserParams};
use crate::types::{ClipRecord, MotionSequence, SpeechFeatureSequence, StyleLabel};

/// Anything that maps a noisy batch to clean-signal predictions.
pub trait Denoiser {
    fn channels(&self) -> usize;
    fn denoise(&self, batch: &DenoiseBatch<f32>) -> Result<Tensor<f32>>;
    /// Maps a final sample from the diffusion space to motion features.
    fn decode(&self, x: &Tensor<f32>) -> Tensor<f32> {
        x.clone()
    }
}

impl Denoiser for DenoiserParams<f32> {
    fn channels(&self) -> usize {
        self.dims().channels()
    }

    fn denoise(&self, batch: &DenoiseBatch<f32>) -> Result<Tensor<f32>> {
        self.predict(batch)
    }

    fn decode(&self, x: &Tensor<f32>) -> Tensor<f32> {
        self.motion_norm.invert(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub omega: f64,
    /// Mask speech together with style in the unconditional branch.
    pub mask_speech_unconditional: bool,
}

impl Guidance {
    pub fn new(omega: f64) -> Self {
        Self { omega, mask_speech_unconditional: false }
    }

    pub fn from_config(c: &SamplingConfig) -> Self {
        Self { omega: c.omega, mask_speech_unconditional: c.mask_speech_unconditional }
    }
}

/// Per-sequence denoiser evaluations by guidance branch, plus batched calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounter {
    pub conditional: usize,
    pub unconditional: usize,
    pub batched_calls: usize,
}

/// `ω·cond + (1 − ω)·uncond`.
pub fn guidance_combine<S: Scalar>(cond: &Tensor<S>, uncond: &Tensor<S>, omega: f64) -> Result<Tensor<S>> {
    let (a, b) = (S::from_f64(omega), S::from_f64(1.0 - omega));
    Ok(cond.zip_map(uncond, |c, u| a * c + b * u)?)
}

/// Guided prediction for a batch whose `styles` hold the conditional labels.
/// A branch with weight exactly zero is not evaluated.
pub fn cfg_denoise(den: &impl Denoiser, batch: &DenoiseBatch<f32>, guidance: Guidance, counter: &mut EvalCounter) -> Result<Tensor<f32>> {
    let b = batch.len();
    let cond = if guidance.omega != 0.0 {
        counter.conditional += b;
        counter.batched_calls += 1;
        Some(den.denoise(batch)?)
    } else {
        None
    };
    let uncond = if guidance.omega != 1.0 {
        let mut u = batch.clone();
        u.styles = vec![None; b];
        if guidance.mask_speech_unconditional {
            u.speech_masked = vec![true; b];
        }
        counter.unconditional += b;
        counter.batched_calls += 1;
        Some(den.denoise(&u)?)
    } else {
        None
    };
    match (cond, uncond) {
        (Some(c), Some(u)) => guidance_combine(&c, &u, guidance.omega),
        (Some(c), None) => Ok(c),
        (None, Some(u)) => Ok(u),
        (None, None) => unreachable!("omega cannot be both 0 and 1"),
    }
}

/// Denoises all clips jointly from `x_T ~ N(0, I)` down to `t = 1`.
/// Every step makes one batched call per guidance branch.
pub fn sample_batch(
    den: &impl Denoiser,
    sched: &NoiseSchedule,
    speech: &[Tensor<f32>],
    styles: &[StyleLabel],
    guidance: Guidance,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor<f32>>, EvalCounter)> {
    if speech.is_empty() || speech.len() != styles.len() {
        return Err(Error::Invalid("need one style per speech clip and at least one clip".into()));
    }
    let lens: Vec<usize> = speech.iter().map(|s| s.rows()).collect();
    let total: usize = lens.iter().sum();
    let stacked = Tensor::vstack(&speech.iter().collect::<Vec<_>>())?;
    let mut x: Tensor<f32> = gaussian(total, den.channels(), rng);
    let mut counter = EvalCounter::default();
    for t in (1..=sched.steps()).rev() {
        let batch = DenoiseBatch {
            x_t: x,
            speech: stacked.clone(),
            lens: lens.clone(),
            steps: vec![t; lens.len()],
            styles: styles.iter().copied().map(Some).collect(),
            speech_masked: vec![false; lens.len()],
        };
        let x0 = cfg_denoise(den, &batch, guidance, &mut counter)?;
        let noise = (t > 1).then(|| gaussian(total, den.channels(), rng));
        x = reverse_step(&batch.x_t, &x0, t, sched, noise.as_ref())?;
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("generated motion".into()));
    }
    let x = den.decode(&x);
    let mut out = Vec::with_capacity(lens.len());
    let mut row = 0;
    for n in lens {
        out.push(x.slice_rows(row, n));
        row += n;
    }
    Ok((out, counter))
}

/// One clip for the full speech sequence, seeded.
pub fn generate_clip(
    den: &impl Denoiser,
    sched: &NoiseSchedule,
    speech: &Tensor<f32>,
    style: StyleLabel,
    guidance: Guidance,
    seed: u64,
) -> Result<(Tensor<f32>, EvalCounter)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut clips, counter) = sample_batch(den, sched, std::slice::from_ref(speech), &[style], guidance, &mut rng)?;
    Ok((clips.remove(0), counter))
}

/// Clip placement for a long request: starts advance by `clip_len − K`, the
/// last clip is right-aligned so the output ends exactly at frame `M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub total: usize,
    pub clip_len: usize,
    pub overlap: usize,
    pub starts: Vec<usize>,
}

impl ClipPlan {
    pub fn new(total: usize, clip_len: usize, overlap: usize) -> Result<Self> {
        if total < 1 {
            return Err(Error::Invalid("requested motion must have at least one frame".into()));
        }
        if clip_len < 1 || overlap >= clip_len {
            return Err(Error::Invalid(format!("need 0 <= overlap ({overlap}) < clip_len ({clip_len})")));
        }
        if total <= clip_len {
            return Ok(Self { total, clip_len: total, overlap: 0, starts: vec![0] });
        }
        let stride = clip_len - overlap;
        let extra = (total - clip_len).div_ceil(stride);
        let mut starts: Vec<usize> = (0..extra).map(|c| c * stride).collect();
        starts.push(total - clip_len);
        Ok(Self { total, clip_len, overlap, starts })
    }

    pub fn clips(&self) -> usize {
        self.starts.len()
    }

    /// `(start, len)` of each blended seam, one per clip boundary.
    pub fn seams(&self) -> Vec<(usize, usize)> {
        self.starts[..self.starts.len() - 1]
            .iter()
            .map(|&s| (s + self.clip_len - self.overlap, self.overlap))
            .filter(|&(_, k)| k > 0)
            .collect()
    }

    /// Joins clips: seam frame `k` is `(1 − w_k)·prev + w_k·next` with
    /// `w_k = k/(K − 1)` (`w_0 = 1` when `K = 1`); other frames are copied.
    pub fn blend(&self, clips: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        if clips.len() != self.clips() || clips.iter().any(|c| c.rows() != self.clip_len) {
            return Err(Error::Shape("clip count or length disagrees with the plan".into()));
        }
        let cols = clips[0].cols();
        let mut out = Tensor::zeros(self.total, cols);
        let k_len = self.overlap;
        for (c, (clip, &start)) in clips.iter().zip(&self.starts).enumerate() {
            let seam_start = if c == 0 { start } else { self.starts[c - 1] + self.clip_len - k_len };
            for r in 0..self.clip_len {
                let g = start + r;
                if g < seam_start {
                    continue;
                }
                let k = g - seam_start;
                if c > 0 && k < k_len {
                    let w = if k_len == 1 { 1.0 } else { k as f32 / (k_len - 1) as f32 };
                    let src = clip.row(r);
                    for (o, &v) in out.row_mut(g).iter_mut().zip(src) {
                        *o = (1.0 - w) * *o + w * v;
                    }
                } else {
                    out.row_mut(g).copy_from_slice(clip.row(r));
                }
            }
        }
        Ok(out)
    }
}

/// Inputs of a long generation.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub speech: SpeechFeatureSequence,
    pub style: StyleLabel,
    pub guidance: Guidance,
    pub overlap: usize,
    pub clip_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LongMotion {
    pub frames: Tensor<f32>,
    pub plan: ClipPlan,
    pub clips: Vec<Tensor<f32>>,
    pub counter: EvalCounter,
}

/// Generates exactly `M = speech.len()` frames; all clips share one batched
/// denoising loop with independent noise.
pub fn generate_long(den: &impl Denoiser, sched: &NoiseSchedule, req: &GenerationRequest) -> Result<LongMotion> {
    let plan = ClipPlan::new(req.speech.len(), req.clip_len, req.overlap)?;
    let speech: Vec<Tensor<f32>> = plan.starts.iter().map(|&s| req.speech.assembled().slice_rows(s, plan.clip_len)).collect();
    let styles = vec![req.style; plan.clips()];
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let (clips, counter) = sample_batch(den, sched, &speech, &styles, req.guidance, &mut rng)?;
    let frames = plan.blend(&clips)?;
    Ok(LongMotion { frames, plan, clips, counter })
}

/// Euclidean distance between consecutive frames.
pub fn frame_velocities(frames: &Tensor<f32>) -> Vec<f64> {
    (1..frames.rows())
        .map(|r| frames.row(r).iter().zip(frames.row(r - 1)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Velocities split into those touching a seam (entry and exit included)
/// and those strictly inside clip bodies.
pub fn seam_and_body_velocities(frames: &Tensor<f32>, seams: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>) {
    let v = frame_velocities(frames);
    let in_seam = |i: usize| seams.iter().any(|&(s, k)| i + 1 >= s && i < s + k);
    let (mut seam, mut body) = (Vec::new(), Vec::new());
    for (i, &x) in v.iter().enumerate() {
        if in_seam(i) {
            seam.push(x)
        } else {
            body.push(x)
        }
    }
    (seam, body)
}

/// Metadata written next to each generated motion file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub style: StyleLabel,
    pub omega: f64,
    pub mask_speech_unconditional: bool,
    pub seed: u64,
    pub frames: usize,
    pub fps: f64,
    pub clip_len: usize,
    pub overlap_frames: usize,
    pub clips: usize,
    pub denoiser_evaluations: EvalCounter,
    pub checkpoint: Option<String>,
}

/// Writes `<dir>/<name>.clip` in the corpus clip format and `<dir>/<name>.json`.
pub fn write_generated(
    dir: &Path,
    name: &str,
    motion: MotionSequence,
    speech: SpeechFeatureSequence,
    sidecar: &SampleSidecar,
) -> Result<PathBuf> {
    if motion.len() != speech.len() {
        return Err(Error::Shape(format!("motion has {} frames, speech {}", motion.len(), speech.len())));
    }
    let path = dir.join(format!("{name}.clip"));
    let record = ClipRecord { clip_id: name.to_string(), motion, speech, style: sidecar.style };
    write_clip(&path, &record)?;
    let meta = dir.join(format!("{name}.json"));
    std::fs::write(&meta, serde_json::to_vec_pretty(sidecar)?).map_err(|e| Error::io(&meta, e))?;
    Ok(path)
}
