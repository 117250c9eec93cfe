//! Domain types shared across the pipeline.

use cospeech_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::orthonormality_residual;

/// Tolerance on `max |R Rᵀ − I|` for ground-truth joint blocks.
pub const ORTHONORMAL_TOL: f64 = 1e-4;

/// Motion as `N` rows of `J * 9` flattened rotation matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Tensor<f32>,
    joints: usize,
    fps: f64,
}

impl MotionSequence {
    pub fn new(frames: Tensor<f32>, joints: usize, fps: f64) -> Result<Self> {
        if frames.rows() < 1 {
            return Err(Error::Shape("motion needs at least one frame".into()));
        }
        if joints == 0 || frames.cols() != joints * 9 {
            return Err(Error::Shape(format!("motion has {} channels, expected {} joints x 9", frames.cols(), joints)));
        }
        if !(fps > 0.0) {
            return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, joints, fps })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<f32> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.joints * 9
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self { frames: self.frames.slice_rows(start, len), joints: self.joints, fps: self.fps }
    }

    /// The 3x3 block of joint `j` at frame `n`, widened to f64.
    pub fn joint_block(&self, n: usize, j: usize) -> [f64; 9] {
        let row = self.frames.row(n);
        std::array::from_fn(|k| row[j * 9 + k] as f64)
    }
}

/// Per-frame speech features: audio descriptors `a`, transcript embedding `e`
/// and their concatenation `s = [a ‖ e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechFeatureSequence {
    audio: Tensor<f32>,
    transcript: Tensor<f32>,
    assembled: Tensor<f32>,
}

impl SpeechFeatureSequence {
    pub(crate) fn from_parts(audio: Tensor<f32>, transcript: Tensor<f32>, assembled: Tensor<f32>) -> Self {
        Self { audio, transcript, assembled }
    }

    pub fn audio(&self) -> &Tensor<f32> {
        &self.audio
    }

    pub fn transcript(&self) -> &Tensor<f32> {
        &self.transcript
    }

    pub fn assembled(&self) -> &Tensor<f32> {
        &self.assembled
    }

    pub fn len(&self) -> usize {
        self.assembled.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.assembled.rows() == 0
    }

    pub fn d_audio(&self) -> usize {
        self.audio.cols()
    }

    pub fn d_text(&self) -> usize {
        self.transcript.cols()
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            audio: self.audio.slice_rows(start, len),
            transcript: self.transcript.slice_rows(start, len),
            assembled: self.assembled.slice_rows(start, len),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleLabel {
    pub identity_id: usize,
    pub emotion_id: usize,
}

impl StyleLabel {
    pub fn new(identity_id: usize, emotion_id: usize) -> Self {
        Self { identity_id, emotion_id }
    }

    pub fn check(&self, n_identities: usize, n_emotions: usize) -> Result<()> {
        if self.identity_id >= n_identities || self.emotion_id >= n_emotions {
            return Err(Error::Invalid(format!(
                "style ({}, {}) outside vocabulary {n_identities} x {n_emotions}",
                self.identity_id, self.emotion_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub motion: MotionSequence,
    pub speech: SpeechFeatureSequence,
    pub style: StyleLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    FrameCountMismatch { motion: usize, speech: usize },
    NonFinite { field: &'static str },
    NotOrthonormal { frame: usize, joint: usize, residual: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::FrameCountMismatch { motion, speech } => {
                write!(f, "frame count mismatch: motion {motion}, speech {speech}")
            }
            Violation::NonFinite { field } => write!(f, "non-finite values in {field}"),
            Violation::NotOrthonormal { frame, joint, residual } => {
                write!(f, "rotation not orthonormal at frame {frame}, joint {joint} (residual {residual:.3e})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a ground-truth clip against the type invariants. Reports every
/// violation found, except that orthonormality is reported once per clip.
pub fn validate_clip(record: &ClipRecord) -> ValidationReport {
    let mut violations = Vec::new();
    let m = &record.motion;
    let s = &record.speech;
    if m.len() != s.len() || s.audio().rows() != s.transcript().rows() {
        violations.push(Violation::FrameCountMismatch { motion: m.len(), speech: s.len() });
    }
    if !m.frames().all_finite() {
        violations.push(Violation::NonFinite { field: "motion" });
    }
    if !s.assembled().all_finite() {
        violations.push(Violation::NonFinite { field: "speech" });
    }
    'scan: for n in 0..m.len() {
        for j in 0..m.joints() {
            let residual = orthonormality_residual(&m.joint_block(n, j));
            if !(residual <= ORTHONORMAL_TOL) {
                violations.push(Violation::NotOrthonormal { frame: n, joint: j, residual });
                break 'scan;
            }
        }
    }
    ValidationReport { violations }
}
