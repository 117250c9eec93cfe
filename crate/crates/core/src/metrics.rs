//! Motion metrics: Fréchet distance over autoencoder latents, latent
//! diversity, per-joint recall (SRGR), beat alignment, and a linear probe
//! for style classification.

use std::path::Path;

use cospeech_autograd::nn::Linear;
use cospeech_autograd::{Adam, Graph, ParamStore, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::MetricsConfig;
use crate::error::{Error, Result};
use crate::types::MotionSequence;

/// Ridge added to fitted latent covariances.
pub const COV_RIDGE: f64 = 1e-6;
const STD_FLOOR: f32 = 1e-2;

/// Training settings of the motion autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderSpec {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub context_frames: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Drop the tanh non-linearities.
    pub linear: bool,
}

impl AutoencoderSpec {
    pub fn from_config(c: &MetricsConfig) -> Self {
        Self {
            latent_dim: c.latent_dim,
            hidden_dim: c.hidden_dim,
            context_frames: c.context_frames,
            steps: c.ae_steps,
            lr: c.ae_lr,
            batch: c.ae_batch,
            linear: false,
        }
    }
}

/// Per-frame encoder over a window of standardized frames, pooled by a
/// temporal mean into one latent per clip. The decoder reconstructs the
/// centre frame.
#[derive(Debug, Clone)]
pub struct MotionAutoencoder {
    pub spec: AutoencoderSpec,
    pub store: ParamStore<f32>,
    enc: [Linear; 2],
    dec: [Linear; 2],
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl MotionAutoencoder {
    pub fn train(clips: &[&MotionSequence], spec: &AutoencoderSpec, seed: u64) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::Data("autoencoder needs at least one training clip".into()))?;
        let c = first.channels();
        if clips.iter().any(|m| m.channels() != c) {
            return Err(Error::Shape("training clips differ in channel count".into()));
        }
        let (mean, std) = channel_moments(clips);
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = (2 * spec.context_frames + 1) * c;
        let enc = [
            Linear::new(&mut store, "enc.0", w, spec.hidden_dim, rng),
            Linear::new(&mut store, "enc.1", spec.hidden_dim, spec.latent_dim, rng),
        ];
        let dec = [
            Linear::new(&mut store, "dec.0", spec.latent_dim, spec.hidden_dim, rng),
            Linear::new(&mut store, "dec.1", spec.hidden_dim, c, rng),
        ];
        let mut ae = Self { spec: spec.clone(), store, enc, dec, mean, std };
        let normed: Vec<Tensor<f32>> = clips.iter().map(|m| ae.standardize(m)).collect();
        let mut adam = Adam::new(&ae.store, spec.lr);
        for _ in 0..spec.steps {
            let picks: Vec<(usize, usize)> = (0..spec.batch)
                .map(|_| {
                    let k = rng.random_range(0..normed.len());
                    (k, rng.random_range(0..normed[k].rows()))
                })
                .collect();
            let inputs = ae.windows_at(&normed, &picks);
            let target = Tensor::from_fn(picks.len(), c, |r, ch| normed[picks[r].0].get(picks[r].1, ch));
            let mut g = Graph::new(&ae.store);
            let x = g.input(inputs);
            let z = ae.encode_graph(&mut g, x)?;
            let y = ae.decode_graph(&mut g, z)?;
            let diff = g.value(y).zip_map(&target, |a, b| a - b)?;
            let n = diff.len() as f32;
            let loss = diff.data().iter().map(|d| (d * d) as f64).sum::<f64>() / n as f64;
            let loss = g.external_scalar(y, loss as f32, diff.map(|d| 2.0 * d / n))?;
            let grads = g.backward(loss)?.into_params();
            adam.update(&mut ae.store, &grads);
        }
        Ok(ae)
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn act(&self, g: &mut Graph<'_, f32>, x: Var) -> Var {
        if self.spec.linear {
            x
        } else {
            g.tanh(x)
        }
    }

    fn encode_graph(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let h = self.enc[0].forward(g, x)?;
        let h = self.act(g, h);
        Ok(self.enc[1].forward(g, h)?)
    }

    fn decode_graph(&self, g: &mut Graph<'_, f32>, z: Var) -> Result<Var> {
        let h = self.dec[0].forward(g, z)?;
        let h = self.act(g, h);
        Ok(self.dec[1].forward(g, h)?)
    }

    fn standardize(&self, m: &MotionSequence) -> Tensor<f32> {
        let f = m.frames();
        Tensor::from_fn(f.rows(), f.cols(), |r, c| (f.get(r, c) - self.mean[c]) / self.std[c])
    }

    fn windows_at(&self, normed: &[Tensor<f32>], picks: &[(usize, usize)]) -> Tensor<f32> {
        let ctx = self.spec.context_frames as isize;
        let c = self.mean.len();
        let w = (2 * ctx as usize + 1) * c;
        let mut out = Tensor::zeros(picks.len(), w);
        for (r, &(k, n)) in picks.iter().enumerate() {
            let clip = &normed[k];
            let last = clip.rows() as isize - 1;
            let row = out.row_mut(r);
            for (o, off) in (-ctx..=ctx).enumerate() {
                let src = (n as isize + off).clamp(0, last) as usize;
                row[o * c..(o + 1) * c].copy_from_slice(clip.row(src));
            }
        }
        out
    }

    fn check(&self, m: &MotionSequence) -> Result<()> {
        if m.channels() != self.mean.len() {
            return Err(Error::Shape(format!("motion has {} channels, autoencoder {}", m.channels(), self.mean.len())));
        }
        Ok(())
    }

    /// Per-frame latents `[N x latent_dim]`.
    pub fn encode_frames(&self, m: &MotionSequence) -> Result<Tensor<f32>> {
        self.check(m)?;
        let normed = [self.standardize(m)];
        let picks: Vec<(usize, usize)> = (0..m.len()).map(|n| (0, n)).collect();
        let mut g = Graph::inference(&self.store);
        let x = g.input(self.windows_at(&normed, &picks));
        let z = self.encode_graph(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    /// Clip latent: temporal mean of frame latents.
    pub fn encode(&self, m: &MotionSequence) -> Result<Vec<f64>> {
        let z = self.encode_frames(m)?;
        let mut out = vec![0.0; z.cols()];
        for r in 0..z.rows() {
            for (o, &v) in out.iter_mut().zip(z.row(r)) {
                *o += v as f64;
            }
        }
        Ok(out.into_iter().map(|v| v / z.rows() as f64).collect())
    }

    pub fn encode_all(&self, set: &[&MotionSequence]) -> Result<Vec<Vec<f64>>> {
        set.iter().map(|m| self.encode(m)).collect()
    }

    /// Mean squared reconstruction error of standardized frames, and the
    /// error of always predicting the training mean.
    pub fn reconstruction_error(&self, m: &MotionSequence) -> Result<(f64, f64)> {
        self.check(m)?;
        let normed = [self.standardize(m)];
        let picks: Vec<(usize, usize)> = (0..m.len()).map(|n| (0, n)).collect();
        let mut g = Graph::inference(&self.store);
        let x = g.input(self.windows_at(&normed, &picks));
        let z = self.encode_graph(&mut g, x)?;
        let y = self.decode_graph(&mut g, z)?;
        let target = &normed[0];
        let n = target.len() as f64;
        let err = g.value(y).data().iter().zip(target.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n;
        let base = target.data().iter().map(|&b| (b as f64).powi(2)).sum::<f64>() / n;
        Ok((err, base))
    }
}

fn channel_moments(clips: &[&MotionSequence]) -> (Vec<f32>, Vec<f32>) {
    let c = clips[0].channels();
    let (mut s, mut q, mut n) = (vec![0.0f64; c], vec![0.0f64; c], 0.0f64);
    for m in clips {
        let f = m.frames();
        for r in 0..f.rows() {
            for (k, &v) in f.row(r).iter().enumerate() {
                s[k] += v as f64;
                q[k] += (v as f64).powi(2);
            }
        }
        n += f.rows() as f64;
    }
    let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
    let std = q.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0).sqrt() as f32).max(STD_FLOOR)).collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

/// Sample mean and unbiased covariance of row vectors, plus [`COV_RIDGE`].
pub fn gaussian_moments(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    let d = samples.first().map_or(0, |s| s.len());
    if n < 2 || d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::Invalid("need at least two equal-length samples to fit moments".into()));
    }
    let x = DMatrix::from_fn(n, d, |r, c| samples[r][c]);
    let mean = DVector::from_fn(d, |c, _| x.column(c).mean());
    let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n - 1) as f64 + DMatrix::identity(d, d) * COV_RIDGE;
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`, with the trace of the cross
/// term computed as `Tr((Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2})`.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape("Gaussian moments differ in dimension".into()));
    }
    let a = psd_sqrt(s1);
    let inner = &a * s2 * &a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dist = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

/// Fréchet distance between Gaussians fitted to two latent sets.
pub fn fgd_from_latents(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    let d = reference.first().map_or(0, |v| v.len());
    for (name, set) in [("generated", generated), ("reference", reference)] {
        if set.len() < d + 1 {
            return Err(Error::Invalid(format!("{name} set has {} clips; FGD needs at least {}", set.len(), d + 1)));
        }
    }
    let (m1, s1) = gaussian_moments(generated)?;
    let (m2, s2) = gaussian_moments(reference)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

pub fn fgd(generated: &[&MotionSequence], reference: &[&MotionSequence], ae: &MotionAutoencoder) -> Result<f64> {
    fgd_from_latents(&ae.encode_all(generated)?, &ae.encode_all(reference)?)
}

/// Mean absolute latent difference over `n_pairs` seeded random pairs `i ≠ j`.
pub fn diversity_from_latents(latents: &[Vec<f64>], n_pairs: usize, seed: u64) -> Result<f64> {
    let n = latents.len();
    if n < 2 || n_pairs == 0 {
        return Err(Error::Invalid("diversity needs at least two clips and one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (&latents[i], &latents[j]);
        total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    Ok(total / n_pairs as f64)
}

pub fn diversity(set: &[&MotionSequence], ae: &MotionAutoencoder, n_pairs: usize, seed: u64) -> Result<f64> {
    diversity_from_latents(&ae.encode_all(set)?, n_pairs, seed)
}

/// Weighted fraction of joints whose 9-d rotation features lie within `delta`
/// of the reference. `weights` default to uniform over frames.
pub fn srgr(generated: &MotionSequence, reference: &MotionSequence, weights: Option<&[f64]>, delta: f64) -> Result<f64> {
    if generated.frames().shape() != reference.frames().shape() || generated.joints() != reference.joints() {
        return Err(Error::Shape("generated and reference motion differ in shape".into()));
    }
    let n = generated.len();
    if let Some(w) = weights {
        if w.len() != n || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 || w.iter().any(|&x| x < 0.0) {
            return Err(Error::Invalid("SRGR weights must be one non-negative weight per frame summing to 1".into()));
        }
    }
    let j = generated.joints();
    let recall = |f: usize| {
        let hits = (0..j)
            .filter(|&k| {
                let (a, b) = (generated.joint_block(f, k), reference.joint_block(f, k));
                a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() < delta
            })
            .count();
        hits as f64 / j as f64
    };
    Ok(match weights {
        Some(w) => w.iter().enumerate().map(|(f, wf)| wf * recall(f)).sum(),
        None => (0..n).map(recall).sum::<f64>() / n as f64,
    })
}

/// Times (seconds) of local minima of the central-difference feature speed
/// that fall below the median speed.
pub fn motion_beats(m: &MotionSequence) -> Vec<f64> {
    let f = m.frames();
    let n = f.rows();
    if n < 5 {
        return Vec::new();
    }
    let speed: Vec<f64> = (1..n - 1)
        .map(|i| f.row(i + 1).iter().zip(f.row(i - 1)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt() / 2.0)
        .collect();
    let mut sorted = speed.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    (1..speed.len() - 1)
        .filter(|&i| speed[i] < speed[i - 1] && speed[i] <= speed[i + 1] && speed[i] < median)
        .map(|i| (i + 1) as f64 / m.fps())
        .collect()
}

/// Mean over motion beats of `exp(−d²/(2σ²))`, `d` the distance to the
/// nearest audio beat; 0 when either set is empty.
pub fn beat_align_times(motion_beats: &[f64], audio_beats: &[f64], sigma: f64) -> f64 {
    if motion_beats.is_empty() || audio_beats.is_empty() {
        return 0.0;
    }
    let total: f64 = motion_beats
        .iter()
        .map(|b| {
            let d = audio_beats.iter().map(|a| (b - a).abs()).fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    total / motion_beats.len() as f64
}

pub fn beat_align(m: &MotionSequence, audio_beats: &[f64], sigma: f64) -> f64 {
    beat_align_times(&motion_beats(m), audio_beats, sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fgd: f64,
    pub diversity: f64,
    pub srgr: f64,
    pub beat_align: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub config: MetricsConfig,
}

impl MetricsReport {
    pub fn table_header() -> &'static str {
        "| FGD | SRGR | BeatAlign | Diversity |"
    }

    pub fn table_row(&self) -> String {
        format!("| {:.4} | {:.4} | {:.4} | {:.4} |", self.fgd, self.srgr, self.beat_align, self.diversity)
    }

    pub fn to_text(&self) -> String {
        format!(
            "fgd        {:.6}\ndiversity  {:.6}\nsrgr       {:.6}\nbeat_align {:.6}\ngenerated  {}\nreference  {}\n",
            self.fgd, self.diversity, self.srgr, self.beat_align, self.n_generated, self.n_reference
        )
    }

    /// Writes `report.json` and `report.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

/// All four metrics for paired generated/reference clips. `audio_beats[i]`
/// belongs to clip `i`.
pub fn evaluate(
    generated: &[&MotionSequence],
    reference: &[&MotionSequence],
    audio_beats: &[Vec<f64>],
    ae: &MotionAutoencoder,
    cfg: &MetricsConfig,
    seed: u64,
) -> Result<MetricsReport> {
    if generated.len() != reference.len() || audio_beats.len() != generated.len() {
        return Err(Error::Invalid("generated, reference and beat lists must pair up".into()));
    }
    let gen_lat = ae.encode_all(generated)?;
    let ref_lat = ae.encode_all(reference)?;
    let n = generated.len() as f64;
    let mut srgr_sum = 0.0;
    let mut beat_sum = 0.0;
    for ((g, r), beats) in generated.iter().zip(reference).zip(audio_beats) {
        srgr_sum += srgr(g, r, None, cfg.srgr_delta)?;
        beat_sum += beat_align(g, beats, cfg.beat_sigma_seconds);
    }
    Ok(MetricsReport {
        fgd: fgd_from_latents(&gen_lat, &ref_lat)?,
        diversity: diversity_from_latents(&gen_lat, cfg.diversity_pairs, seed)?,
        srgr: srgr_sum / n,
        beat_align: beat_sum / n,
        n_generated: generated.len(),
        n_reference: reference.len(),
        config: cfg.clone(),
    })
}

/// Per-channel temporal mean and standard deviation of a clip.
pub fn probe_features(m: &MotionSequence) -> Vec<f64> {
    let f = m.frames();
    let n = f.rows() as f64;
    let mut mean = vec![0.0; f.cols()];
    let mut sq = vec![0.0; f.cols()];
    for r in 0..f.rows() {
        for (c, &v) in f.row(r).iter().enumerate() {
            mean[c] += v as f64 / n;
            sq[c] += (v as f64).powi(2) / n;
        }
    }
    let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q - m * m).max(0.0).sqrt()).collect();
    mean.into_iter().chain(std).collect()
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        let d = features.first().map_or(0, |f| f.len());
        if features.is_empty() || features.len() != labels.len() || labels.iter().any(|&l| l >= classes) {
            return Err(Error::Invalid("probe needs one in-range label per feature vector".into()));
        }
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| features.iter().map(|f| f[k]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d).map(|k| (features.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-6)).collect();
        let mut probe = Self { mean, std, weights: vec![vec![0.0; d]; classes], bias: vec![0.0; classes] };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let (lr, l2) = (0.5, 1e-3);
        for _ in 0..500 {
            let mut gw = vec![vec![0.0; d]; classes];
            let mut gb = vec![0.0; classes];
            for (x, &y) in xs.iter().zip(labels) {
                let p = probe.probs_std(x);
                for k in 0..classes {
                    let e = (p[k] - if k == y { 1.0 } else { 0.0 }) / n;
                    gb[k] += e;
                    for (g, xv) in gw[k].iter_mut().zip(x) {
                        *g += e * xv;
                    }
                }
            }
            for k in 0..classes {
                probe.bias[k] -= lr * gb[k];
                for (w, g) in probe.weights[k].iter_mut().zip(&gw[k]) {
                    *w -= lr * (g + l2 * *w);
                }
            }
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn probs_std(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> =
            self.weights.iter().zip(&self.bias).map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn predict(&self, f: &[f64]) -> usize {
        let p = self.probs_std(&self.standardize(f));
        (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(f, &l)| self.predict(f) == l).count();
        hits as f64 / labels.len().max(1) as f64
    }
}
