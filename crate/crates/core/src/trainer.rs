//! Training loop: noise clean motion at a uniform step, randomly mask the
//! style (and optionally the speech) condition, predict `x̂0`, and take one
//! Adam step on the total loss.

use std::io::Write;
use std::path::{Path, PathBuf};

use cospeech_autograd::{Adam, Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::{Config, TrainingConfig};
use crate::dataset::{iterate_batches, Corpus, Split};
use crate::diffusion::{gaussian, make_schedule, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fusion_net::{ChannelNorm, DenoiseBatch, DenoiserDims, DenoiserParams};
use crate::losses::{batch_loss_and_grad, LossBreakdown, LossWeights};
use crate::types::{ClipRecord, StyleLabel};
use crate::util::mix_seed;

const MODEL_STREAM: u64 = 0x6d6f_6465;
const STEP_STREAM: u64 = 1 << 40;
const EPOCH_STREAM: u64 = 2 << 40;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// Right-padded batch with a frame-validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    /// `[B * max_len x J*9]`, item `b` at rows `b*max_len..`.
    pub motion: Tensor<f32>,
    pub speech: Tensor<f32>,
    pub mask: Vec<Vec<bool>>,
    pub max_len: usize,
    pub styles: Vec<StyleLabel>,
}

impl PaddedBatch {
    pub fn from_clips(clips: &[ClipRecord]) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (c, d) = (first.motion.channels(), first.speech.assembled().cols());
        if clips.iter().any(|r| r.motion.channels() != c || r.speech.assembled().cols() != d || r.motion.len() != r.speech.len()) {
            return Err(Error::Shape("batch clips disagree in width or frame count".into()));
        }
        let max_len = clips.iter().map(|r| r.motion.len()).max().unwrap_or(0);
        let mut motion = Tensor::zeros(clips.len() * max_len, c);
        let mut speech = Tensor::zeros(clips.len() * max_len, d);
        for (b, r) in clips.iter().enumerate() {
            for n in 0..r.motion.len() {
                motion.row_mut(b * max_len + n).copy_from_slice(r.motion.frames().row(n));
                speech.row_mut(b * max_len + n).copy_from_slice(r.speech.assembled().row(n));
            }
        }
        let mask = clips.iter().map(|r| (0..max_len).map(|n| n < r.motion.len()).collect()).collect();
        Ok(Self { motion, speech, mask, max_len, styles: clips.iter().map(|r| r.style).collect() })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Valid lengths; the mask must be a prefix mask.
    pub fn lens(&self) -> Result<Vec<usize>> {
        self.mask
            .iter()
            .map(|m| {
                let n = m.iter().take_while(|&&v| v).count();
                if m[n..].iter().any(|&v| v) || n == 0 {
                    return Err(Error::Invalid("validity mask must be a non-empty prefix".into()));
                }
                Ok(n)
            })
            .collect()
    }

    /// Valid rows only, stacked item after item.
    pub fn stacked(&self) -> Result<(Tensor<f32>, Tensor<f32>, Vec<usize>)> {
        let lens = self.lens()?;
        let pick = |t: &Tensor<f32>| {
            let parts: Vec<Tensor<f32>> = lens.iter().enumerate().map(|(b, &n)| t.slice_rows(b * self.max_len, n)).collect();
            Tensor::vstack(&parts.iter().collect::<Vec<_>>())
        };
        Ok((pick(&self.motion)?, pick(&self.speech)?, lens))
    }
}

/// Noisy inputs plus their clean targets.
#[derive(Debug, Clone)]
pub struct PreparedBatch<S> {
    pub denoise: DenoiseBatch<S>,
    pub x0: Tensor<S>,
}

impl PreparedBatch<f32> {
    pub fn cast<T: Scalar>(&self) -> PreparedBatch<T> {
        let d = &self.denoise;
        PreparedBatch {
            denoise: DenoiseBatch {
                x_t: d.x_t.cast(),
                speech: d.speech.cast(),
                lens: d.lens.clone(),
                steps: d.steps.clone(),
                styles: d.styles.clone(),
                speech_masked: d.speech_masked.clone(),
            },
            x0: self.x0.cast(),
        }
    }
}

/// Standardizes motion with `norm`, then draws `t ~ U[1, T]`, noise and
/// condition masks for every item.
pub fn prepare_batch(
    batch: &PaddedBatch,
    norm: &ChannelNorm,
    sched: &NoiseSchedule,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch<f32>> {
    let (x0, speech, lens) = batch.stacked()?;
    let x0 = norm.apply(&x0);
    let b = lens.len();
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let styles = batch.styles.iter().map(|&s| (!rng.random_bool(cfg.style_mask_prob)).then_some(s)).collect();
    let speech_masked = (0..b).map(|_| rng.random_bool(cfg.speech_mask_prob)).collect();
    let mut x_t = Tensor::zeros(x0.rows(), x0.cols());
    let mut row = 0;
    for (&n, &t) in lens.iter().zip(&steps) {
        let clean = x0.slice_rows(row, n);
        let eps: Tensor<f32> = gaussian(n, x0.cols(), rng);
        let noisy = q_sample(&clean, t, sched, Some(&eps), rng)?;
        for r in 0..n {
            x_t.row_mut(row + r).copy_from_slice(noisy.row(r));
        }
        row += n;
    }
    Ok(PreparedBatch { denoise: DenoiseBatch { x_t, speech, lens, steps, styles, speech_masked }, x0 })
}

/// Total loss and parameter gradients for a prepared batch.
pub fn loss_and_grads<S: Scalar>(
    params: &DenoiserParams<S>,
    prep: &PreparedBatch<S>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Option<Tensor<S>>>)> {
    let mut g = Graph::new(&params.store);
    let out = params.forward(&mut g, &prep.denoise)?;
    let (lb, grad) = batch_loss_and_grad(&prep.x0, g.value(out), &prep.denoise.lens, w)?;
    let loss = g.external_scalar(out, S::from_f64(lb.total), grad)?;
    Ok((lb, g.backward(loss)?.into_params()))
}

pub fn loss_weights(cfg: &TrainingConfig) -> LossWeights {
    LossWeights { lambda_vel: cfg.lambda_vel, lambda_acc: cfg.lambda_acc, huber_delta: cfg.huber_delta }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub items: usize,
    pub frames: usize,
    pub style_masked: usize,
    pub speech_masked: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: DenoiserParams<f32>,
    pub adam: Adam,
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub seed: u64,
}

impl TrainState {
    /// Fresh state with identity normalization.
    pub fn new(config: &Config) -> Self {
        let params = DenoiserParams::init(&DenoiserDims::from_config(config), mix_seed(config.seed, MODEL_STREAM));
        let mut adam = Adam::new(&params.store, config.training.lr);
        adam.clip_norm = (config.training.grad_clip > 0.0).then_some(config.training.grad_clip);
        Self { params, adam, step: 0, history: Vec::new(), seed: config.seed }
    }

    /// Fresh state with normalization fitted on `clips`.
    pub fn fitted(config: &Config, clips: &[&ClipRecord]) -> Result<Self> {
        let mut state = Self::new(config);
        state.params.fit_norms(clips)?;
        Ok(state)
    }

    /// Resumes from a checkpoint; the step counter continues from it.
    pub fn from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Self {
        let t = &ck.config.training;
        let mut adam = ck.restore_adam(t.lr);
        adam.clip_norm = (t.grad_clip > 0.0).then_some(t.grad_clip);
        Self { params: ck.params.clone(), adam, step: ck.step, history: Vec::new(), seed: ck.config.seed }
    }

    /// Per-step generator, a pure function of `(seed, step)`.
    pub fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, STEP_STREAM + self.step))
    }
}

/// One optimizer update. A non-finite loss or gradient aborts with the step
/// and loss terms in the message and leaves the state untouched.
pub fn train_step(state: &mut TrainState, batch: &PaddedBatch, sched: &NoiseSchedule, cfg: &TrainingConfig) -> Result<StepRecord> {
    let mut rng = state.step_rng();
    let prep = prepare_batch(batch, &state.params.motion_norm, sched, cfg, &mut rng)?;
    let (lb, grads) = loss_and_grads(&state.params, &prep, &loss_weights(cfg))?;
    if !lb.is_finite() || grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!(
            "training step {}: huber {} velocity {} acceleration {}",
            state.step + 1,
            lb.huber,
            lb.velocity,
            lb.acceleration
        )));
    }
    state.adam.update(&mut state.params.store, &grads);
    state.step += 1;
    let d = &prep.denoise;
    let record = StepRecord {
        step: state.step,
        loss: lb,
        items: d.len(),
        frames: d.lens.iter().sum(),
        style_masked: d.styles.iter().filter(|s| s.is_none()).count(),
        speech_masked: d.speech_masked.iter().filter(|&&m| m).count(),
    };
    state.history.push(record.clone());
    Ok(record)
}

/// Batches of an epoch, shuffled by `(seed, epoch)`.
pub fn epoch_batches(corpus: &Corpus, cfg: &Config, epoch: u64) -> Result<Vec<Vec<ClipRecord>>> {
    let t = &cfg.training;
    iterate_batches(corpus, Split::Train, t.batch_size, t.clip_max_frames, mix_seed(cfg.seed, EPOCH_STREAM + epoch))
}

/// Trains until `config.training.steps`, starting from `state`. Batch `k` of
/// the run depends only on `(seed, k)`, so a resumed run sees the same data.
/// With `out_dir`, appends to the JSON-lines log and writes checkpoints.
pub fn fit_from(
    mut state: TrainState,
    corpus: &Corpus,
    config: &Config,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainState> {
    config.validate()?;
    let sched = make_schedule(config.diffusion.steps, config.diffusion.schedule, config.diffusion.beta_start, config.diffusion.beta_end)?;
    let t = &config.training;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let per_epoch = epoch_batches(corpus, config, 0)?.len() as u64;
    let mut cached: Option<(u64, Vec<Vec<ClipRecord>>)> = None;
    while state.step < t.steps {
        let epoch = state.step / per_epoch;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            cached = Some((epoch, epoch_batches(corpus, config, epoch)?));
        }
        let batches = &cached.as_ref().expect("cached epoch").1;
        let batch = PaddedBatch::from_clips(&batches[(state.step % per_epoch) as usize])?;
        let record = train_step(&mut state, &batch, &sched, t)?;
        if let Some((path, f)) = log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_step(&record);
        if let Some(dir) = out_dir {
            if t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0 {
                save_checkpoint(&checkpoint_path(dir, state.step), &state.params, state.step, Some(&state.adam), config)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &state.params, state.step, Some(&state.adam), config)?;
    }
    Ok(state)
}

/// Fits speech statistics on the train split and trains from scratch.
pub fn fit(corpus: &Corpus, config: &Config, out_dir: Option<&Path>, on_step: impl FnMut(&StepRecord)) -> Result<TrainState> {
    config.validate()?;
    let state = TrainState::fitted(config, &corpus.split_clips(Split::Train))?;
    fit_from(state, corpus, config, out_dir, on_step)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:07}.ckpt"))
}

/// Trailing moving average of total loss with the given window.
pub fn smoothed_losses(history: &[StepRecord], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut sum = 0.0;
    for (i, r) in history.iter().enumerate() {
        sum += r.loss.total;
        if i >= w {
            sum -= history[i - w].loss.total;
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::assemble_speech;
    use crate::losses::huber_loss;
    use crate::types::MotionSequence;

    fn tiny_config() -> Config {
        let mut c = Config::default();
        c.model.joints = 2;
        c.model.d_speech = 8;
        c.model.d_motion = 8;
        c.model.n_specific_layers = 1;
        c.model.m_shared_layers = 1;
        c.model.heads = 2;
        c.model.ff_mult = 2;
        c.model.time_embed_dim = 8;
        c.diffusion.steps = 20;
        c.training.lr = 1e-3;
        c
    }

    fn clips(c: &Config, lens: &[usize], seed: u64) -> Vec<ClipRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        lens.iter()
            .enumerate()
            .map(|(i, &n)| {
                let motion = MotionSequence::new(gaussian(n, c.model.joints * 9, &mut rng), c.model.joints, 30.0).unwrap();
                let audio: Tensor<f32> = gaussian(n, c.features.d_audio(), &mut rng);
                let text: Tensor<f32> = gaussian(n, c.features.text_dim, &mut rng);
                ClipRecord {
                    clip_id: format!("c{i}"),
                    motion,
                    speech: assemble_speech(&audio, &text).unwrap(),
                    style: StyleLabel::new(i % 4, (i / 2) % 4),
                }
            })
            .collect()
    }

    #[test]
    fn padding_and_mask() {
        let c = tiny_config();
        let cl = clips(&c, &[3, 5], 1);
        let b = PaddedBatch::from_clips(&cl).unwrap();
        assert_eq!(b.max_len, 5);
        assert_eq!(b.motion.rows(), 10);
        assert_eq!(b.mask[0], vec![true, true, true, false, false]);
        assert!(b.motion.row(3).iter().chain(b.motion.row(4)).all(|&v| v == 0.0));
        let (m, s, lens) = b.stacked().unwrap();
        assert_eq!(lens, vec![3, 5]);
        assert_eq!(m.slice_rows(0, 3), *cl[0].motion.frames());
        assert_eq!(s.slice_rows(3, 5), *cl[1].speech.assembled());
        let mut holey = b.clone();
        holey.mask[0] = vec![true, false, true, false, false];
        assert!(holey.stacked().is_err());
    }

    #[test]
    fn mask_probabilities_are_respected() {
        let c = tiny_config();
        let sched = make_schedule(c.diffusion.steps, c.diffusion.schedule, 1e-4, 2e-2).unwrap();
        let batch = PaddedBatch::from_clips(&clips(&c, &[4], 2)).unwrap();
        for (p, expect_masked) in [(0.0, 0u64), (1.0, 1000u64)] {
            let mut cfg = c.clone();
            cfg.training.style_mask_prob = p;
            let mut state = TrainState::new(&cfg);
            let mut masked = 0u64;
            for _ in 0..1000 {
                masked += train_step(&mut state, &batch, &sched, &cfg.training).unwrap().style_masked as u64;
            }
            assert_eq!(masked, expect_masked);
            assert_eq!(state.step, 1000);
        }
    }

    #[test]
    fn speech_masking_follows_its_probability() {
        let mut c = tiny_config();
        c.training.speech_mask_prob = 1.0;
        let sched = make_schedule(c.diffusion.steps, c.diffusion.schedule, 1e-4, 2e-2).unwrap();
        let batch = PaddedBatch::from_clips(&clips(&c, &[4, 6], 3)).unwrap();
        let prep = prepare_batch(
            &batch,
            &ChannelNorm::identity(DenoiserDims::from_config(&c).channels()),
            &sched,
            &c.training,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(prep.denoise.speech_masked, vec![true, true]);
        assert!(prep.denoise.steps.iter().all(|&t| (1..=20).contains(&t)));
    }

    #[test]
    fn runs_are_deterministic() {
        let c = tiny_config();
        let sched = make_schedule(c.diffusion.steps, c.diffusion.schedule, 1e-4, 2e-2).unwrap();
        let batch = PaddedBatch::from_clips(&clips(&c, &[6, 4, 5], 4)).unwrap();
        let run = || {
            let mut s = TrainState::new(&c);
            for _ in 0..10 {
                train_step(&mut s, &batch, &sched, &c.training).unwrap();
            }
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.store, b.params.store);
        assert!(a.history.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn huber_only_gradient_matches_finite_differences() {
        let mut c = tiny_config();
        c.training.lambda_vel = 0.0;
        c.training.lambda_acc = 0.0;
        c.training.style_mask_prob = 0.0;
        let sched = make_schedule(c.diffusion.steps, c.diffusion.schedule, 1e-4, 2e-2).unwrap();
        let batch = PaddedBatch::from_clips(&clips(&c, &[5, 3], 5)).unwrap();
        let prep = prepare_batch(
            &batch,
            &ChannelNorm::identity(DenoiserDims::from_config(&c).channels()),
            &sched,
            &c.training,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap()
        .cast::<f64>();
        let params = TrainState::new(&c).params.cast::<f64>();
        let (lb, grads) = loss_and_grads(&params, &prep, &loss_weights(&c.training)).unwrap();
        let huber_of = |p: &DenoiserParams<f64>| huber_loss(&prep.x0, &p.predict(&prep.denoise).unwrap(), 1.0).unwrap();
        assert!((lb.total - huber_of(&params)).abs() < 1e-12);
        let ids: Vec<_> = params.store.ids().collect();
        for k in 0..12 {
            let id = ids[(k * 5 + 1) % ids.len()];
            let Some(g) = &grads[id.0] else { continue };
            let i = (k * 11) % g.len();
            let h = 1e-4;
            let mut plus = params.clone();
            plus.store.get_mut(id).data_mut()[i] += h;
            let mut minus = params.clone();
            minus.store.get_mut(id).data_mut()[i] -= h;
            let fd = (huber_of(&plus) - huber_of(&minus)) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-9, "{fd} vs {an}");
        }
    }

    #[test]
    fn smoothing_window() {
        let hist: Vec<StepRecord> = [4.0, 2.0, 6.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| StepRecord {
                step: i as u64 + 1,
                loss: LossBreakdown { total: t, ..Default::default() },
                items: 1,
                frames: 1,
                style_masked: 0,
                speech_masked: 0,
            })
            .collect();
        assert_eq!(smoothed_losses(&hist, 2), vec![4.0, 3.0, 4.0]);
    }
}
