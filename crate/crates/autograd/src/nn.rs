//! Building blocks shared by the denoiser and the metric autoencoder.

use rand::Rng;

use crate::graph::{AttnSegment, Graph, RelBias, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.xavier(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = Some(store.zeros(format!("{name}.bias"), 1, out_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn no_bias<S: Scalar>(store: &mut ParamStore<S>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.xavier(format!("{name}.weight"), in_dim, out_dim, rng);
        Self { weight, bias: None, in_dim, out_dim }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self { gamma: store.ones(format!("{name}.gamma"), 1, dim), beta: store.zeros(format!("{name}.beta"), 1, dim) }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Pre-normalization transformer encoder layer with optional relative
/// position bias on the self-attention logits.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub rel_bias: Option<(ParamId, usize)>,
    pub heads: usize,
    pub dim: usize,
}

impl EncoderLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        rel_max_offset: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let rel_bias = rel_max_offset.map(|m| (store.zeros(format!("{name}.rel_bias"), heads, 2 * m + 1), m));
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff_mult * dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_mult * dim, dim, rng),
            rel_bias,
            heads,
            dim,
        }
    }

    /// Applies the layer to stacked sequences given as `(start, len)` blocks.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, blocks: &[(usize, usize)]) -> Result<Var> {
        let d = self.dim;
        let h = self.norm1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let (q, k, v) = split3(g, qkv, d)?;
        let bias = self.rel_bias.map(|(id, m)| RelBias { table: g.param(id), max_offset: m });
        let segs = blocks.iter().map(|&(s, l)| AttnSegment::square(s, l)).collect();
        let a = g.attention(q, k, v, bias, segs, self.heads)?;
        let a = self.out.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.ff1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Splits a `[R x 3d]` projection into three `[R x d]` tensors.
fn split3<S: Scalar>(g: &mut Graph<'_, S>, qkv: Var, d: usize) -> Result<(Var, Var, Var)> {
    let q = g.col_slice(qkv, 0, d)?;
    let k = g.col_slice(qkv, d, d)?;
    let v = g.col_slice(qkv, 2 * d, d)?;
    Ok((q, k, v))
}

/// Stack of encoder layers followed by a final normalization.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        rel_max_offset: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let layers =
            (0..depth).map(|i| EncoderLayer::new(store, &format!("{name}.{i}"), dim, heads, ff_mult, rel_max_offset, rng)).collect();
        Self { layers, norm: LayerNorm::new(store, &format!("{name}.norm"), dim) }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, mut x: Var, blocks: &[(usize, usize)]) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, blocks)?;
        }
        self.norm.forward(g, x)
    }
}
