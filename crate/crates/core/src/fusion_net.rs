//! The denoiser `x̂0 = D(x_t, t, c)`: a masked identity-emotion style matrix,
//! per-stream encoders over `[z_s ‖ σ(stream) ‖ z_t]`, cross-attention from
//! motion to speech for the shared feature, and a shared encoder over three
//! fused tokens followed by the channel-concatenated streams.
//!
//! Batches stack sequences along rows. A batch item with `N` frames occupies
//! `N + 2` rows in each specific stream and `N + 3` rows in the fusion stage.

use cospeech_autograd::nn::{Encoder, Linear};
use cospeech_autograd::{AttnSegment, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::{ClipRecord, StyleLabel};

/// Architecture hyper-parameters, stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserDims {
    pub joints: usize,
    pub d_audio: usize,
    pub d_text: usize,
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
    pub rel_max_offset: usize,
    pub time_embed_dim: usize,
}

impl DenoiserDims {
    pub fn from_config(c: &Config) -> Self {
        let m = &c.model;
        Self {
            joints: m.joints,
            d_audio: c.features.d_audio(),
            d_text: c.features.text_dim,
            d_speech: m.d_speech,
            d_motion: m.d_motion,
            d_id: m.d_id,
            d_emo: m.d_emo,
            n_identities: m.n_identities,
            n_emotions: m.n_emotions,
            n_specific_layers: m.n_specific_layers,
            m_shared_layers: m.m_shared_layers,
            heads: m.heads,
            ff_mult: m.ff_mult,
            rel_max_offset: m.rel_max_offset,
            time_embed_dim: m.time_embed_dim,
        }
    }

    pub fn channels(&self) -> usize {
        self.joints * 9
    }

    pub fn speech_dim(&self) -> usize {
        self.d_audio + self.d_text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Speech,
    Motion,
}

/// Parameter handles of the denoiser; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct FusionDenoiser {
    pub dims: DenoiserDims,
    pub id_embed: ParamId,
    pub emo_embed: ParamId,
    pub style_speech: Linear,
    pub style_motion: Linear,
    pub time_speech: [Linear; 2],
    pub time_motion: [Linear; 2],
    pub speech_in: Linear,
    pub motion_in: Linear,
    pub speech_enc: Encoder,
    pub motion_enc: Encoder,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub token_speech: Linear,
    pub fuse_in: Linear,
    pub shared_enc: Encoder,
    pub head: Linear,
}

impl FusionDenoiser {
    pub fn build<S: Scalar>(dims: &DenoiserDims, store: &mut ParamStore<S>, seed: u64) -> Self {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let d = dims;
        let style_len = d.d_id * d.d_emo;
        let rel = Some(d.rel_max_offset);
        Self {
            dims: d.clone(),
            id_embed: store.normal("id_embed", d.n_identities, d.d_id, 1.0, rng),
            emo_embed: store.normal("emo_embed", d.n_emotions, d.d_emo, 1.0, rng),
            style_speech: Linear::new(store, "style_speech", style_len, d.d_speech, rng),
            style_motion: Linear::new(store, "style_motion", style_len, d.d_motion, rng),
            time_speech: [
                Linear::new(store, "time_speech.0", d.time_embed_dim, d.d_speech, rng),
                Linear::new(store, "time_speech.1", d.d_speech, d.d_speech, rng),
            ],
            time_motion: [
                Linear::new(store, "time_motion.0", d.time_embed_dim, d.d_motion, rng),
                Linear::new(store, "time_motion.1", d.d_motion, d.d_motion, rng),
            ],
            speech_in: Linear::new(store, "speech_in", d.speech_dim(), d.d_speech, rng),
            motion_in: Linear::new(store, "motion_in", d.channels(), d.d_motion, rng),
            speech_enc: Encoder::new(store, "speech_enc", d.n_specific_layers, d.d_speech, d.heads, d.ff_mult, rel, rng),
            motion_enc: Encoder::new(store, "motion_enc", d.n_specific_layers, d.d_motion, d.heads, d.ff_mult, rel, rng),
            cross_k: Linear::no_bias(store, "cross_k", d.d_speech, d.d_motion, rng),
            cross_v: Linear::no_bias(store, "cross_v", d.d_speech, d.d_motion, rng),
            token_speech: Linear::new(store, "token_speech", d.d_speech, d.d_motion, rng),
            fuse_in: Linear::new(store, "fuse_in", 2 * d.d_motion + d.d_speech, d.d_motion, rng),
            shared_enc: Encoder::new(store, "shared_enc", d.m_shared_layers, d.d_motion, d.heads, d.ff_mult, None, rng),
            head: Linear::new(store, "head", d.d_motion, d.channels(), rng),
        }
    }
}

/// Per-channel standardization fitted on training data: `(x - mean) * inv_std`
/// with `inv_std = 1 / (std + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl ChannelNorm {
    /// Offset added to the speech feature std.
    pub const SPEECH_EPS: f64 = 1e-3;
    /// Offset added to the motion channel std.
    pub const MOTION_EPS: f64 = 1e-2;

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], inv_std: vec![1.0; dim] }
    }

    /// Statistics over all rows of `parts`, which must share a width.
    pub fn fit<'a>(parts: impl IntoIterator<Item = &'a Tensor<f32>>, eps: f64) -> Result<Self> {
        let mut parts = parts.into_iter().peekable();
        let dim = parts.peek().ok_or_else(|| Error::Data("no rows to fit channel statistics".into()))?.cols();
        let (mut sum, mut sq, mut n) = (vec![0.0f64; dim], vec![0.0f64; dim], 0usize);
        for s in parts {
            if s.cols() != dim {
                return Err(Error::Shape(format!("channel statistics over widths {dim} and {}", s.cols())));
            }
            for r in 0..s.rows() {
                for (k, &v) in s.row(r).iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
            n += s.rows();
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let inv_std = sq.iter().zip(&mean).map(|(q, m)| (1.0 / ((q / n - m * m).max(0.0).sqrt() + eps)) as f32).collect();
        Ok(Self { mean: mean.into_iter().map(|m| m as f32).collect(), inv_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply<S: Scalar>(&self, x: &Tensor<S>) -> Tensor<S> {
        Tensor::from_fn(x.rows(), x.cols(), |r, c| S::from_f64((x.get(r, c).as_f64() - self.mean[c] as f64) * self.inv_std[c] as f64))
    }

    pub fn invert<S: Scalar>(&self, x: &Tensor<S>) -> Tensor<S> {
        Tensor::from_fn(x.rows(), x.cols(), |r, c| S::from_f64(x.get(r, c).as_f64() / self.inv_std[c] as f64 + self.mean[c] as f64))
    }
}

/// Denoiser architecture with its parameter values.
#[derive(Debug, Clone)]
pub struct DenoiserParams<S> {
    pub net: FusionDenoiser,
    pub store: ParamStore<S>,
    pub speech_norm: ChannelNorm,
    /// Motion standardization; the diffusion runs in the normalized space.
    pub motion_norm: ChannelNorm,
}

/// Style matrix `z_id ⊗ z_emo`, or zeros when masked.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleMatrix<S> {
    pub values: Tensor<S>,
    pub masked: bool,
}

/// Style token `z_s` for each stream, derived from one style matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTokens<S> {
    pub matrix: StyleMatrix<S>,
    pub speech: Tensor<S>,
    pub motion: Tensor<S>,
}

/// Stacked denoiser inputs. `styles[i] = None` is the masked style `∅`;
/// `speech_masked[i]` zeroes item `i`'s normalized speech features.
#[derive(Debug, Clone)]
pub struct DenoiseBatch<S> {
    pub x_t: Tensor<S>,
    pub speech: Tensor<S>,
    pub lens: Vec<usize>,
    pub steps: Vec<usize>,
    pub styles: Vec<Option<StyleLabel>>,
    pub speech_masked: Vec<bool>,
}

impl<S: Scalar> DenoiseBatch<S> {
    pub fn single(x_t: Tensor<S>, speech: Tensor<S>, t: usize, style: Option<StyleLabel>) -> Self {
        let n = x_t.rows();
        Self { x_t, speech, lens: vec![n], steps: vec![t], styles: vec![style], speech_masked: vec![false] }
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    fn check(&self, d: &DenoiserDims) -> Result<()> {
        let b = self.lens.len();
        if b == 0 || self.steps.len() != b || self.styles.len() != b || self.speech_masked.len() != b {
            return Err(Error::Shape("denoise batch fields disagree on the batch size".into()));
        }
        let total: usize = self.lens.iter().sum();
        if self.lens.contains(&0) || self.x_t.rows() != total || self.speech.rows() != total {
            return Err(Error::Shape(format!(
                "batch lengths sum to {total}, x_t has {} rows, speech {}",
                self.x_t.rows(),
                self.speech.rows()
            )));
        }
        if self.x_t.cols() != d.channels() || self.speech.cols() != d.speech_dim() {
            return Err(Error::Shape(format!(
                "x_t/speech widths {}/{} vs model {}/{}",
                self.x_t.cols(),
                self.speech.cols(),
                d.channels(),
                d.speech_dim()
            )));
        }
        for s in self.styles.iter().flatten() {
            s.check(d.n_identities, d.n_emotions)?;
        }
        Ok(())
    }
}

/// `(start, len)` of each item's sequence when `extra` token rows are added.
pub fn token_blocks(lens: &[usize], extra: usize) -> Vec<(usize, usize)> {
    let mut start = 0;
    lens.iter()
        .map(|&n| {
            let b = (start, n + extra);
            start += n + extra;
            b
        })
        .collect()
}

/// Sinusoidal embedding of diffusion steps, one row per step.
pub fn timestep_embedding<S: Scalar>(steps: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    Tensor::from_fn(steps.len(), dim, |r, c| {
        let i = c % half;
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = steps[r] as f64 * freq;
        S::from_f64(if c < half { a.sin() } else { a.cos() })
    })
}

impl<S: Scalar> DenoiserParams<S> {
    pub fn init(dims: &DenoiserDims, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let net = FusionDenoiser::build(dims, &mut store, seed);
        Self { net, store, speech_norm: ChannelNorm::identity(dims.speech_dim()), motion_norm: ChannelNorm::identity(dims.channels()) }
    }

    /// Fits speech and motion standardization on training clips.
    pub fn fit_norms(&mut self, clips: &[&ClipRecord]) -> Result<()> {
        let speech = ChannelNorm::fit(clips.iter().map(|c| c.speech.assembled()), ChannelNorm::SPEECH_EPS)?;
        let motion = ChannelNorm::fit(clips.iter().map(|c| c.motion.frames()), ChannelNorm::MOTION_EPS)?;
        let d = self.dims();
        if speech.dim() != d.speech_dim() || motion.dim() != d.channels() {
            return Err(Error::Shape("clip widths do not match the denoiser".into()));
        }
        self.speech_norm = speech;
        self.motion_norm = motion;
        Ok(())
    }

    pub fn dims(&self) -> &DenoiserDims {
        &self.net.dims
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserParams<T> {
        DenoiserParams {
            net: self.net.clone(),
            store: self.store.cast(),
            speech_norm: self.speech_norm.clone(),
            motion_norm: self.motion_norm.clone(),
        }
    }

    /// Style matrices `[B x d_id*d_emo]` and style tokens per stream.
    pub fn style_tokens(&self, g: &mut Graph<'_, S>, styles: &[Option<StyleLabel>]) -> Result<(Var, Var, Var)> {
        let ids = styles.iter().enumerate().map(|(_, s)| (0, s.map_or(0, |l| l.identity_id) as u32)).collect();
        let emos = styles.iter().map(|s| (0, s.map_or(0, |l| l.emotion_id) as u32)).collect();
        let id_tab = g.param(self.net.id_embed);
        let emo_tab = g.param(self.net.emo_embed);
        let z_id = g.gather(&[id_tab], ids)?;
        let z_emo = g.gather(&[emo_tab], emos)?;
        let m = g.outer_rows(z_id, z_emo)?;
        let keep = styles.iter().map(|s| if s.is_some() { S::one() } else { S::zero() }).collect();
        let m = g.scale_rows(m, keep)?;
        let zs_speech = self.net.style_speech.forward(g, m)?;
        let zs_motion = self.net.style_motion.forward(g, m)?;
        Ok((m, zs_speech, zs_motion))
    }

    /// Time tokens `z_t` per stream for each step.
    pub fn time_tokens(&self, g: &mut Graph<'_, S>, steps: &[usize]) -> Result<(Var, Var)> {
        let emb = g.input(timestep_embedding(steps, self.net.dims.time_embed_dim));
        let branch = |g: &mut Graph<'_, S>, mlp: &[Linear; 2]| -> Result<Var> {
            let h = mlp[0].forward(g, emb)?;
            let h = g.silu(h);
            Ok(mlp[1].forward(g, h)?)
        };
        let zs = branch(g, &self.net.time_speech)?;
        let zm = branch(g, &self.net.time_motion)?;
        Ok((zs, zm))
    }

    /// Lays out `[z_s ‖ σ(stream) ‖ z_t]` per item and applies the stream's
    /// encoder. Returns `[Σ(N + 2) x d_stream]`.
    pub fn encode_specific(&self, g: &mut Graph<'_, S>, which: Stream, stream: Var, z_s: Var, z_t: Var, lens: &[usize]) -> Result<Var> {
        let (proj, enc) = match which {
            Stream::Speech => (&self.net.speech_in, &self.net.speech_enc),
            Stream::Motion => (&self.net.motion_in, &self.net.motion_enc),
        };
        let h = proj.forward(g, stream)?;
        let mut index = Vec::with_capacity(lens.iter().sum::<usize>() + 2 * lens.len());
        let mut off = 0u32;
        for (b, &n) in lens.iter().enumerate() {
            index.push((0, b as u32));
            index.extend((off..off + n as u32).map(|r| (1, r)));
            index.push((2, b as u32));
            off += n as u32;
        }
        let seq = g.gather(&[z_s, h, z_t], index)?;
        Ok(enc.forward(g, seq, &token_blocks(lens, 2))?)
    }

    /// `f = softmax(x' (s' W_k)ᵀ / √d) (s' W_v)` within each item.
    pub fn encode_shared(&self, g: &mut Graph<'_, S>, x_prime: Var, s_prime: Var, blocks: &[(usize, usize)]) -> Result<Var> {
        if g.value(x_prime).rows() != g.value(s_prime).rows() {
            return Err(Error::Shape("motion and speech features differ in length".into()));
        }
        let k = self.net.cross_k.forward(g, s_prime)?;
        let v = self.net.cross_v.forward(g, s_prime)?;
        let segs = blocks.iter().map(|&(s, l)| AttnSegment::square(s, l)).collect();
        Ok(g.attention(x_prime, k, v, None, segs, 1)?)
    }

    /// Fused tokens `z_f^i` read from the token rows of `s'`, `x'` and `f`,
    /// followed by the projected per-frame concatenation `x' ‖ s' ‖ f`, through
    /// the shared encoder and the output head. Returns `[ΣN x J*9]`.
    pub fn fuse_and_project(&self, g: &mut Graph<'_, S>, x_prime: Var, s_prime: Var, f: Var, lens: &[usize]) -> Result<Var> {
        let blocks = token_blocks(lens, 2);
        let firsts: Vec<(u32, u32)> = blocks.iter().map(|&(s, _)| (0, s as u32)).collect();
        let lasts: Vec<(u32, u32)> = blocks.iter().map(|&(s, l)| (0, (s + l - 1) as u32)).collect();
        let interior: Vec<(u32, u32)> = blocks.iter().flat_map(|&(s, l)| (s + 1..s + l - 1).map(|r| (0, r as u32))).collect();
        let token = |g: &mut Graph<'_, S>, src: Var| -> Result<Var> {
            let a = g.gather(&[src], firsts.clone())?;
            let b = g.gather(&[src], lasts.clone())?;
            Ok(g.add(a, b)?)
        };
        let t1 = token(g, s_prime)?;
        let zf1 = self.net.token_speech.forward(g, t1)?;
        let zf2 = token(g, x_prime)?;
        let zf3 = token(g, f)?;
        let xi = g.gather(&[x_prime], interior.clone())?;
        let si = g.gather(&[s_prime], interior.clone())?;
        let fi = g.gather(&[f], interior)?;
        let cat = g.concat_cols(&[xi, si, fi])?;
        let h = self.net.fuse_in.forward(g, cat)?;
        let mut index = Vec::new();
        let mut off = 0u32;
        for (b, &n) in lens.iter().enumerate() {
            index.extend([(0, b as u32), (1, b as u32), (2, b as u32)]);
            index.extend((off..off + n as u32).map(|r| (3, r)));
            off += n as u32;
        }
        let seq = g.gather(&[zf1, zf2, zf3, h], index)?;
        let fused_blocks = token_blocks(lens, 3);
        let out = self.net.shared_enc.forward(g, seq, &fused_blocks)?;
        let frames = fused_blocks.iter().flat_map(|&(s, l)| (s + 3..s + l).map(|r| (0, r as u32))).collect();
        let out = g.gather(&[out], frames)?;
        Ok(self.net.head.forward(g, out)?)
    }

    fn speech_input(&self, batch: &DenoiseBatch<S>) -> Tensor<S> {
        let mut s = self.speech_norm.apply(&batch.speech);
        let mut row = 0;
        for (&n, &masked) in batch.lens.iter().zip(&batch.speech_masked) {
            if masked {
                for r in row..row + n {
                    s.row_mut(r).iter_mut().for_each(|v| *v = S::zero());
                }
            }
            row += n;
        }
        s
    }

    /// Full denoiser on a batch, recorded on `g`. `x_t` and the returned
    /// `x̂0` live in the standardized motion space. Returns `[ΣN x J*9]`.
    pub fn forward(&self, g: &mut Graph<'_, S>, batch: &DenoiseBatch<S>) -> Result<Var> {
        batch.check(&self.net.dims)?;
        let (_, zs_speech, zs_motion) = self.style_tokens(g, &batch.styles)?;
        let (zt_speech, zt_motion) = self.time_tokens(g, &batch.steps)?;
        let speech = g.input(self.speech_input(batch));
        let x = g.input(batch.x_t.clone());
        let s_prime = self.encode_specific(g, Stream::Speech, speech, zs_speech, zt_speech, &batch.lens)?;
        let x_prime = self.encode_specific(g, Stream::Motion, x, zs_motion, zt_motion, &batch.lens)?;
        let f = self.encode_shared(g, x_prime, s_prime, &token_blocks(&batch.lens, 2))?;
        self.fuse_and_project(g, x_prime, s_prime, f, &batch.lens)
    }

    /// Forward pass without recording.
    pub fn predict(&self, batch: &DenoiseBatch<S>) -> Result<Tensor<S>> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, batch)?;
        Ok(g.value(out).clone())
    }

    /// `x̂0` for one sequence; `style = None` is the masked style.
    pub fn denoiser_forward(&self, x_t: &Tensor<S>, t: usize, speech: &Tensor<S>, style: Option<StyleLabel>) -> Result<Tensor<S>> {
        self.predict(&DenoiseBatch::single(x_t.clone(), speech.clone(), t, style))
    }

    /// Style matrix and style tokens for one label.
    pub fn build_style_matrix(&self, style: StyleLabel, mask: bool) -> Result<StyleTokens<S>> {
        let d = &self.net.dims;
        style.check(d.n_identities, d.n_emotions)?;
        let mut g = Graph::inference(&self.store);
        let (m, zs, zm) = self.style_tokens(&mut g, &[(!mask).then_some(style)])?;
        let values = g.value(m).clone().reshape(d.d_id, d.d_emo)?;
        Ok(StyleTokens { matrix: StyleMatrix { values, masked: mask }, speech: g.value(zs).clone(), motion: g.value(zm).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian;
    use crate::losses::{batch_loss_and_grad, LossWeights};

    #[test]
    fn channel_norm_standardizes_and_inverts() {
        let a = Tensor::from_vec(2, 2, vec![1.0f32, 10.0, 3.0, 10.0]).unwrap();
        let b = Tensor::from_vec(2, 2, vec![1.0f32, 10.0, 3.0, 10.0]).unwrap();
        let n = ChannelNorm::fit([&a, &b], 0.0).unwrap();
        // Oracle: column 0 has mean 2, population std 1; column 1 is constant.
        assert_eq!(n.mean, vec![2.0, 10.0]);
        assert_eq!(n.inv_std[0], 1.0);
        assert!(n.inv_std[1].is_infinite());
        let n = ChannelNorm::fit([&a, &b], 0.5).unwrap();
        let z = n.apply(&a);
        assert_eq!(z.data(), &[-1.0 / 1.5, 0.0, 1.0 / 1.5, 0.0]);
        let back = n.invert(&z);
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        let wide = Tensor::<f32>::zeros(1, 3);
        assert!(ChannelNorm::fit([&a, &wide], 0.1).is_err());
        assert!(ChannelNorm::fit(std::iter::empty(), 0.1).is_err());
    }

    fn tiny_dims() -> DenoiserDims {
        DenoiserDims {
            joints: 2,
            d_audio: 3,
            d_text: 2,
            d_speech: 8,
            d_motion: 8,
            d_id: 2,
            d_emo: 3,
            n_identities: 3,
            n_emotions: 4,
            n_specific_layers: 2,
            m_shared_layers: 1,
            heads: 2,
            ff_mult: 2,
            rel_max_offset: 4,
            time_embed_dim: 8,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, lens: Vec<usize>, d: &DenoiserDims) -> DenoiseBatch<f64> {
        let n: usize = lens.iter().sum();
        let b = lens.len();
        DenoiseBatch {
            x_t: gaussian(n, d.channels(), rng),
            speech: gaussian(n, d.speech_dim(), rng),
            steps: (0..b).map(|i| 3 + 7 * i).collect(),
            styles: (0..b).map(|i| (i % 3 != 2).then(|| StyleLabel::new(i % 3, i % 4))).collect(),
            speech_masked: vec![false; b],
            lens,
        }
    }

    fn randomize(p: &mut DenoiserParams<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.store.map_in_place(|_, t| {
            for v in t.data_mut() {
                *v += 0.2 * rand::Rng::random_range(&mut rng, -1.0..1.0);
            }
        });
    }

    #[test]
    fn basis_embeddings_give_a_single_entry() {
        let mut p = DenoiserParams::<f64>::init(&tiny_dims(), 0);
        *p.store.get_mut(p.net.id_embed) = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        *p.store.get_mut(p.net.emo_embed) = Tensor::from_fn(4, 3, |r, c| if r == 0 && c == 1 { 1.0 } else { 0.0 });
        let s = p.build_style_matrix(StyleLabel::new(0, 0), false).unwrap();
        let nonzero: Vec<(usize, usize)> =
            (0..2).flat_map(|r| (0..3).map(move |c| (r, c))).filter(|&(r, c)| s.matrix.values.get(r, c) != 0.0).collect();
        assert_eq!(nonzero, vec![(0, 1)]);
        assert_eq!(s.matrix.values.get(0, 1), 1.0);
    }

    #[test]
    fn masked_style_is_zero_and_projects_zero() {
        let p = DenoiserParams::<f64>::init(&tiny_dims(), 1);
        let s = p.build_style_matrix(StyleLabel::new(1, 2), true).unwrap();
        assert!(s.matrix.masked && s.matrix.values.data().iter().all(|&v| v == 0.0));
        // A zero matrix projects to the bias alone.
        let bias = p.store.get(p.net.style_speech.bias.unwrap());
        assert_eq!(&s.speech, bias);
        assert!(p.build_style_matrix(StyleLabel::new(3, 0), false).is_err());
    }

    #[test]
    fn unmasked_style_has_rank_one() {
        let p = DenoiserParams::<f64>::init(&tiny_dims(), 2);
        for id in 0..3 {
            for emo in 0..4 {
                let m = p.build_style_matrix(StyleLabel::new(id, emo), false).unwrap().matrix.values;
                for (r1, r2) in [(0, 1)] {
                    for c1 in 0..3 {
                        for c2 in c1 + 1..3 {
                            let minor = m.get(r1, c1) * m.get(r2, c2) - m.get(r1, c2) * m.get(r2, c1);
                            assert!(minor.abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shape_algebra_and_determinism() {
        let d = tiny_dims();
        let p = DenoiserParams::<f64>::init(&d, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for lens in [vec![1], vec![5, 2, 7]] {
            let b = batch(&mut rng, lens.clone(), &d);
            let mut g = Graph::inference(&p.store);
            let (_, zs, zm) = p.style_tokens(&mut g, &b.styles).unwrap();
            let (ts, tm) = p.time_tokens(&mut g, &b.steps).unwrap();
            let sp = g.input(b.speech.clone());
            let x = g.input(b.x_t.clone());
            let s_prime = p.encode_specific(&mut g, Stream::Speech, sp, zs, ts, &lens).unwrap();
            let x_prime = p.encode_specific(&mut g, Stream::Motion, x, zm, tm, &lens).unwrap();
            let n: usize = lens.iter().sum();
            assert_eq!(g.value(s_prime).rows(), n + 2 * lens.len());
            assert_eq!(g.value(x_prime).rows(), n + 2 * lens.len());
            let out = p.predict(&b).unwrap();
            assert_eq!(out.shape(), b.x_t.shape());
            assert_eq!(out, p.predict(&b).unwrap());
        }
        assert_eq!(token_blocks(&[4, 1], 3), vec![(0, 7), (7, 4)]);
    }

    #[test]
    fn batching_matches_single_items() {
        let d = tiny_dims();
        let mut p = DenoiserParams::<f64>::init(&d, 5);
        randomize(&mut p, 6);
        let b = batch(&mut ChaCha8Rng::seed_from_u64(7), vec![4, 6, 3], &d);
        let all = p.predict(&b).unwrap();
        let mut row = 0;
        for i in 0..3 {
            let n = b.lens[i];
            let one = p.denoiser_forward(&b.x_t.slice_rows(row, n), b.steps[i], &b.speech.slice_rows(row, n), b.styles[i]).unwrap();
            for (a, e) in one.data().iter().zip(all.slice_rows(row, n).data()) {
                assert!((a - e).abs() < 1e-12);
            }
            row += n;
        }
    }

    #[test]
    fn constant_stream_gives_identical_interior_rows() {
        let d = tiny_dims();
        let p = DenoiserParams::<f64>::init(&d, 8);
        let mut g = Graph::inference(&p.store);
        let (_, _, zm) = p.style_tokens(&mut g, &[Some(StyleLabel::new(1, 1))]).unwrap();
        let (_, tm) = p.time_tokens(&mut g, &[9]).unwrap();
        let x = g.input(Tensor::from_fn(6, d.channels(), |_, c| 0.1 * c as f64 - 0.3));
        let out = p.encode_specific(&mut g, Stream::Motion, x, zm, tm, &[6]).unwrap();
        let v = g.value(out);
        for r in 2..7 {
            for c in 0..d.d_motion {
                assert!((v.get(r, c) - v.get(1, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_attention_hand_case() {
        let d = DenoiserDims { d_speech: 2, d_motion: 2, heads: 1, ..tiny_dims() };
        let mut p = DenoiserParams::<f64>::init(&d, 9);
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *p.store.get_mut(p.net.cross_k.weight) = eye.clone();
        *p.store.get_mut(p.net.cross_v.weight) = eye.clone();
        let mut g = Graph::inference(&p.store);
        let x = g.input(eye.clone());
        let s = g.input(eye.clone());
        let f = p.encode_shared(&mut g, x, s, &[(0, 2)]).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let (hi, lo) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let expect = [hi, lo, lo, hi];
        for (a, b) in g.value(f).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((hi - 0.6698).abs() < 1e-4);
    }

    #[test]
    fn shared_attention_of_identical_keys_returns_the_value() {
        let d = tiny_dims();
        let mut p = DenoiserParams::<f64>::init(&d, 10);
        randomize(&mut p, 11);
        let mut g = Graph::inference(&p.store);
        let x = g.input(gaussian(5, d.d_motion, &mut ChaCha8Rng::seed_from_u64(1)));
        let row: Vec<f64> = (0..d.d_speech).map(|c| (c as f64).sin()).collect();
        let s = g.input(Tensor::from_fn(5, d.d_speech, |_, c| row[c]));
        let f = p.encode_shared(&mut g, x, s, &[(0, 5)]).unwrap();
        let w = p.store.get(p.net.cross_v.weight);
        let projected = Tensor::from_vec(1, d.d_speech, row).unwrap().matmul(w).unwrap();
        for r in 0..5 {
            for c in 0..d.d_motion {
                assert!((g.value(f).get(r, c) - projected.get(0, c)).abs() < 1e-12);
            }
        }
        let short = g.input(Tensor::zeros(4, d.d_speech));
        assert!(p.encode_shared(&mut g, x, short, &[(0, 4)]).is_err());
    }

    #[test]
    fn zero_head_gives_zero_prediction() {
        let d = tiny_dims();
        let mut p = DenoiserParams::<f64>::init(&d, 12);
        p.store.get_mut(p.net.head.weight).data_mut().fill(0.0);
        p.store.get_mut(p.net.head.bias.unwrap()).data_mut().fill(0.0);
        let b = batch(&mut ChaCha8Rng::seed_from_u64(2), vec![5], &d);
        assert!(p.predict(&b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditioning_paths_are_live() {
        let d = tiny_dims();
        let p = DenoiserParams::<f64>::init(&d, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = gaussian(6, d.channels(), &mut rng);
        let s: Tensor<f64> = gaussian(6, d.speech_dim(), &mut rng);
        let label = StyleLabel::new(1, 2);
        let cond = p.denoiser_forward(&x, 5, &s, Some(label)).unwrap();
        let uncond = p.denoiser_forward(&x, 5, &s, None).unwrap();
        let other_emo = p.denoiser_forward(&x, 5, &s, Some(StyleLabel::new(1, 3))).unwrap();
        let diff = |a: &Tensor<f64>, b: &Tensor<f64>| a.zip_map(b, |u, v| u - v).unwrap().max_abs();
        assert!(diff(&cond, &uncond) > 0.0);
        assert!(diff(&cond, &other_emo) > 0.0);
        let mut masked = DenoiseBatch::single(x.clone(), s.clone(), 5, Some(label));
        masked.speech_masked[0] = true;
        assert!(diff(&cond, &p.predict(&masked).unwrap()) > 0.0);
        let wide = Tensor::zeros(6, d.speech_dim() + 1);
        assert!(p.denoiser_forward(&x, 5, &wide, Some(label)).is_err());
        assert!(p.denoiser_forward(&x, 5, &s, Some(StyleLabel::new(0, 4))).is_err());
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let d = tiny_dims();
        let mut p = DenoiserParams::<f64>::init(&d, 14);
        randomize(&mut p, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let b = batch(&mut rng, vec![4, 5], &d);
        let x0: Tensor<f64> = gaussian(9, d.channels(), &mut rng);
        let w = LossWeights { lambda_vel: 0.1, lambda_acc: 0.01, huber_delta: 1.0 };
        let loss_of = |p: &DenoiserParams<f64>| {
            let pred = p.predict(&b).unwrap();
            batch_loss_and_grad(&x0, &pred, &b.lens, &w).unwrap().0.total
        };
        let mut g = Graph::new(&p.store);
        let out = p.forward(&mut g, &b).unwrap();
        let (lb, grad) = batch_loss_and_grad(&x0, g.value(out), &b.lens, &w).unwrap();
        let loss = g.external_scalar(out, lb.total, grad).unwrap();
        let grads = g.backward(loss).unwrap();
        let ids: Vec<ParamId> = p.store.ids().collect();
        let mut checked = 0;
        for k in 0..ids.len() {
            let id = ids[(k * 7) % ids.len()];
            let Some(an_t) = grads.param(id) else { continue };
            let i = (k * 13) % an_t.len();
            let an = an_t.data()[i];
            let h = 1e-4;
            let mut plus = p.clone();
            plus.store.get_mut(id).data_mut()[i] += h;
            let mut minus = p.clone();
            minus.store.get_mut(id).data_mut()[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3 || (fd - an).abs() < 1e-9, "{}[{i}]: {fd} vs {an}", p.store.name(id));
            checked += 1;
        }
        assert!(checked >= 10);
    }
}
