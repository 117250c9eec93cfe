//! Reverse-mode tape over 2-D tensors.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the backward pass.

use crate::params::{ParamId, ParamStore};
use crate::scalar::{s, Scalar};
use crate::tensor::{gemm_into, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention block: query rows `q_start..q_start+q_len` attend to key/value
/// rows `k_start..k_start+k_len`. Positions are relative to each start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl AttnSegment {
    /// Self-attention over `len` rows starting at `start`.
    pub fn square(start: usize, len: usize) -> Self {
        Self { q_start: start, q_len: len, k_start: start, k_len: len }
    }
}

/// Learned per-head bias on attention logits indexed by clipped key-query offset.
#[derive(Debug, Clone, Copy)]
pub struct RelBias {
    pub table: Var,
    pub max_offset: usize,
}

enum Op<S> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    ScaleRows(Var, Vec<S>),
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<S>, rstd: Vec<S> },
    Gather { sources: Vec<Var>, index: Vec<(u32, u32)> },
    ConcatCols(Vec<Var>),
    ColSlice { x: Var, start: usize },
    OuterRows(Var, Var),
    Attention(Box<AttnState<S>>),
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
    External { x: Var, grad: Tensor<S> },
}

struct AttnState<S> {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<RelBias>,
    segments: Vec<AttnSegment>,
    heads: usize,
    /// Softmax probabilities per (segment, head), only kept when recording.
    probs: Vec<Tensor<S>>,
}

struct Node<S> {
    value: Option<Tensor<S>>,
    op: Op<S>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    params: Vec<Option<Tensor<S>>>,
    leaves: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to an input leaf.
    pub fn input(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor<S>>> {
        self.params
    }
}

/// Computation tape bound to a parameter store.
pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// Graph that records what the backward pass needs.
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], record: true }
    }

    /// Forward-only graph; [`Graph::backward`] is unavailable.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        Self { record: false, ..Self::new(params) }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.cols() != wv.rows() {
            return Err(Error::Shape(format!("linear input has {} features, weight expects {}", xv.cols(), wv.rows())));
        }
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, wv.cols()) {
                return Err(Error::Shape("linear bias must be a single row".into()));
            }
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bv.row(0));
            }
            gemm_into(xv, false, wv, false, &mut out, S::one(), S::one());
        } else {
            gemm_into(xv, false, wv, false, &mut out, S::one(), S::zero());
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let av = self.value(a);
        let rv = self.value(row);
        if rv.shape() != (1, av.cols()) {
            return Err(Error::Shape("add_row expects a single matching row".into()));
        }
        let mut out = av.clone();
        let r0 = rv.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&r0) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<S>) -> Result<Var> {
        let mut out = self.value(a).clone();
        if factors.len() != out.rows() {
            return Err(Error::Shape("scale_rows needs one factor per row".into()));
        }
        for (r, &f) in factors.iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        Ok(self.push(out, Op::ScaleRows(a, factors)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(fast_tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if self.value(gamma).shape() != (1, cols) || self.value(beta).shape() != (1, cols) {
            return Err(Error::Shape("layer_norm affine rows must match feature count".into()));
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let n = s::<S>(cols as f64);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + s(eps)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        if !self.record {
            xhat = Tensor::zeros(0, 0);
            rstd.clear();
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Builds a tensor whose row `i` is row `index[i].1` of `sources[index[i].0]`.
    pub fn gather(&mut self, sources: &[Var], index: Vec<(u32, u32)>) -> Result<Var> {
        let cols = match sources.first() {
            Some(&v) => self.value(v).cols(),
            None => return Err(Error::Shape("gather needs at least one source".into())),
        };
        for &v in sources {
            if self.value(v).cols() != cols {
                return Err(Error::Shape("gather sources must share a column count".into()));
            }
        }
        let mut out = Tensor::zeros(index.len(), cols);
        for (i, &(src, row)) in index.iter().enumerate() {
            let sv = self.value(*sources.get(src as usize).ok_or_else(|| Error::Shape(format!("gather source {src} out of range")))?);
            if row as usize >= sv.rows() {
                return Err(Error::Shape(format!("gather row {row} out of range for {} rows", sv.rows())));
            }
            out.row_mut(i).copy_from_slice(sv.row(row as usize));
        }
        Ok(self.push(out, Op::Gather { sources: sources.to_vec(), index }))
    }

    /// Rows `start..start + len` of `a`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.gather(&[a], (start..start + len).map(|r| (0, r as u32)).collect())
    }

    /// Per-row concatenation along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&v) => self.value(v).rows(),
            None => return Err(Error::Shape("concat_cols needs at least one part".into())),
        };
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::Shape(format!("concat_cols row mismatch: {} vs {}", rows, pv.rows())));
            }
            cols += pv.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let pc = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + pc].copy_from_slice(pv.row(r));
            }
            off += pc;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + len` of `a`.
    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::Shape(format!("column slice {start}..{} of {} columns", start + len, av.cols())));
        }
        let out = Tensor::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        Ok(self.push(out, Op::ColSlice { x: a, start }))
    }

    /// Row-wise outer product: row `r` of the result is `a[r] ⊗ b[r]` flattened
    /// row-major (`a` index major).
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rows() != bv.rows() {
            return Err(Error::Shape("outer_rows needs equal row counts".into()));
        }
        let (p, q) = (av.cols(), bv.cols());
        let mut out = Tensor::zeros(av.rows(), p * q);
        for r in 0..av.rows() {
            let (ar, br) = (av.row(r), bv.row(r));
            let o = out.row_mut(r);
            for i in 0..p {
                for j in 0..q {
                    o[i * q + j] = ar[i] * br[j];
                }
            }
        }
        Ok(self.push(out, Op::OuterRows(a, b)))
    }

    /// Mean over each `(start, len)` block of rows; one output row per block.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<(usize, usize)>) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(segments.len(), xv.cols());
        for (i, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > xv.rows() {
                return Err(Error::Shape("segment_mean block out of range".into()));
            }
            let inv = S::one() / s(len as f64);
            for r in start..start + len {
                for (o, &v) in out.row_mut(i).iter_mut().zip(xv.row(r)) {
                    *o += v * inv;
                }
            }
        }
        Ok(self.push(out, Op::SegmentMean { x, segments }))
    }

    /// Multi-head scaled dot-product attention over independent segments.
    ///
    /// `q` and `k` share a feature width divisible by `heads`; `v` may be
    /// wider or narrower but must also divide by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<RelBias>, segments: Vec<AttnSegment>, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dv = vv.cols();
        if kv.cols() != d || heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::Shape(format!("attention widths q={d} k={} v={dv} incompatible with {heads} heads", kv.cols())));
        }
        if kv.rows() != vv.rows() {
            return Err(Error::Shape("attention keys and values differ in length".into()));
        }
        for sg in &segments {
            if sg.q_start + sg.q_len > qv.rows() || sg.k_start + sg.k_len > kv.rows() || sg.k_len == 0 {
                return Err(Error::Shape("attention segment out of range".into()));
            }
        }
        let table = match bias {
            Some(b) => {
                let t = self.value(b.table);
                if t.shape() != (heads, 2 * b.max_offset + 1) {
                    return Err(Error::Shape("relative bias table has wrong shape".into()));
                }
                Some((t.clone(), b.max_offset))
            }
            None => None,
        };
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = S::one() / s::<S>(dh as f64).sqrt();
        let mut out: Tensor<S> = Tensor::zeros(qv.rows(), dv);
        let mut probs = Vec::new();
        for sg in &segments {
            for h in 0..heads {
                let mut p = Tensor::zeros(sg.q_len, sg.k_len);
                // logits = scale * Q_h K_h^T
                unsafe {
                    S::gemm(
                        sg.q_len,
                        dh,
                        sg.k_len,
                        scale,
                        qv.data().as_ptr().add(sg.q_start * d + h * dh),
                        d as isize,
                        1,
                        kv.data().as_ptr().add(sg.k_start * d + h * dh),
                        1,
                        d as isize,
                        S::zero(),
                        p.data_mut().as_mut_ptr(),
                        sg.k_len as isize,
                        1,
                    );
                }
                if let Some((t, m)) = &table {
                    for i in 0..sg.q_len {
                        let row = p.row_mut(i);
                        for (j, x) in row.iter_mut().enumerate() {
                            *x += t.get(h, offset_index(i, j, *m));
                        }
                    }
                }
                for i in 0..sg.q_len {
                    softmax_in_place(p.row_mut(i));
                }
                unsafe {
                    S::gemm(
                        sg.q_len,
                        sg.k_len,
                        dvh,
                        S::one(),
                        p.data().as_ptr(),
                        sg.k_len as isize,
                        1,
                        vv.data().as_ptr().add(sg.k_start * dv + h * dvh),
                        dv as isize,
                        1,
                        S::zero(),
                        out.data_mut().as_mut_ptr().add(sg.q_start * dv + h * dvh),
                        dv as isize,
                        1,
                    );
                }
                if self.record {
                    probs.push(p);
                }
            }
        }
        let state = AttnState { q, k, v, bias, segments, heads, probs };
        Ok(self.push(out, Op::Attention(Box::new(state))))
    }

    /// Attaches an externally computed scalar `value` whose gradient with
    /// respect to `x` is `grad`.
    pub fn external_scalar(&mut self, x: Var, value: S, grad: Tensor<S>) -> Result<Var> {
        self.value(x).same_shape(&grad)?;
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }))
    }

    /// Sum of `1 x 1` nodes weighted by constants.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        // Expressed through existing ops so the backward pass stays uniform.
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            if self.value(v).shape() != (1, 1) {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Shape("weighted_sum of nothing".into()))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.record {
            return Err(Error::NotRecording);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        let mut out = Gradients { params: vec![None; self.params.len()], leaves: vec![None; n] };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => out.leaves[idx] = Some(g),
                Op::Param(id) => out.params[id.0] = Some(g),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm_into(&g, false, wv, true, &mut dx, S::one(), S::zero());
                    accumulate(&mut grads, *x, dx);
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm_into(xv, true, &g, false, &mut dw, S::one(), S::zero());
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, column_sums(&g));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, column_sums(&g));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads, *a, g.map(|x| x * k));
                }
                Op::ScaleRows(a, f) => {
                    let mut d = g;
                    for (r, &k) in f.iter().enumerate() {
                        for x in d.row_mut(r) {
                            *x *= k;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.value(*a), |gy, x| gy * gelu_grad(x))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Silu(a) => {
                    let d = g.zip_map(self.value(*a), |gy, x| {
                        let sg = sigmoid(x);
                        gy * sg * (S::one() + x * (S::one() - sg))
                    })?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = self.nodes[idx].value.as_ref().expect("tanh output");
                    let d = g.zip_map(y, |gy, t| gy * (S::one() - t * t))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gm = self.value(*gamma).row(0).to_vec();
                    let (rows, cols) = g.shape();
                    let n = s::<S>(cols as f64);
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    let mut dxh = vec![S::zero(); cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for c in 0..cols {
                            dg.data_mut()[c] += gr[c] * xh[c];
                            db.data_mut()[c] += gr[c];
                            dxh[c] = gr[c] * gm[c];
                            m1 += dxh[c];
                            m2 += dxh[c] * xh[c];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        let o = dx.row_mut(r);
                        for c in 0..cols {
                            o[c] = rstd[r] * (dxh[c] - m1 - xh[c] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Gather { sources, index } => {
                    let mut per_src: Vec<Option<Tensor<S>>> = sources
                        .iter()
                        .map(|&v| {
                            let sv = self.value(v);
                            Some(Tensor::zeros(sv.rows(), sv.cols()))
                        })
                        .collect();
                    for (i, &(src, row)) in index.iter().enumerate() {
                        let t = per_src[src as usize].as_mut().expect("gather grad");
                        for (o, &v) in t.row_mut(row as usize).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    for (&v, t) in sources.iter().zip(per_src) {
                        accumulate(&mut grads, v, t.expect("gather grad"));
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let d = Tensor::from_fn(g.rows(), pc, |r, c| g.get(r, off + c));
                        off += pc;
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::ColSlice { x, start } => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::OuterRows(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (p, q) = (av.cols(), bv.cols());
                    let mut da = Tensor::zeros(av.rows(), p);
                    let mut db = Tensor::zeros(bv.rows(), q);
                    for r in 0..av.rows() {
                        let gr = g.row(r);
                        for i in 0..p {
                            for j in 0..q {
                                let gij = gr[i * q + j];
                                da.data_mut()[r * p + i] += gij * bv.get(r, j);
                                db.data_mut()[r * q + j] += gij * av.get(r, i);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SegmentMean { x, segments } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (i, &(start, len)) in segments.iter().enumerate() {
                        let inv = S::one() / s(len as f64);
                        for r in start..start + len {
                            for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                                *o += v * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::External { x, grad } => {
                    let k = g.item();
                    accumulate(&mut grads, *x, grad.map(|v| v * k));
                }
                Op::Attention(st) => self.attention_backward(st, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn attention_backward(&self, st: &AttnState<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let (qv, kv, vv) = (self.value(st.q), self.value(st.k), self.value(st.v));
        let d = qv.cols();
        let dv = vv.cols();
        let heads = st.heads;
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = S::one() / s::<S>(dh as f64).sqrt();
        let mut dq: Tensor<S> = Tensor::zeros(qv.rows(), d);
        let mut dk: Tensor<S> = Tensor::zeros(kv.rows(), d);
        let mut dvv: Tensor<S> = Tensor::zeros(vv.rows(), dv);
        let mut dtable = st.bias.map(|b| Tensor::zeros(heads, 2 * b.max_offset + 1));
        let mut pi = 0;
        for sg in &st.segments {
            for h in 0..heads {
                let p = &st.probs[pi];
                pi += 1;
                let (ql, kl) = (sg.q_len, sg.k_len);
                unsafe {
                    // dV_h += P^T dO_h
                    S::gemm(
                        kl,
                        ql,
                        dvh,
                        S::one(),
                        p.data().as_ptr(),
                        1,
                        kl as isize,
                        g.data().as_ptr().add(sg.q_start * dv + h * dvh),
                        dv as isize,
                        1,
                        S::one(),
                        dvv.data_mut().as_mut_ptr().add(sg.k_start * dv + h * dvh),
                        dv as isize,
                        1,
                    );
                }
                // dP = dO_h V_h^T
                let mut ds = Tensor::zeros(ql, kl);
                unsafe {
                    S::gemm(
                        ql,
                        dvh,
                        kl,
                        S::one(),
                        g.data().as_ptr().add(sg.q_start * dv + h * dvh),
                        dv as isize,
                        1,
                        vv.data().as_ptr().add(sg.k_start * dv + h * dvh),
                        1,
                        dv as isize,
                        S::zero(),
                        ds.data_mut().as_mut_ptr(),
                        kl as isize,
                        1,
                    );
                }
                for i in 0..ql {
                    let pr = p.row(i);
                    let dr = ds.row_mut(i);
                    let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..kl {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                if let (Some(dt), Some(b)) = (dtable.as_mut(), st.bias) {
                    for i in 0..ql {
                        for j in 0..kl {
                            let c = offset_index(i, j, b.max_offset);
                            let cur = dt.get(h, c);
                            dt.set(h, c, cur + ds.get(i, j));
                        }
                    }
                }
                unsafe {
                    // dQ_h += scale dS K_h
                    S::gemm(
                        ql,
                        kl,
                        dh,
                        scale,
                        ds.data().as_ptr(),
                        kl as isize,
                        1,
                        kv.data().as_ptr().add(sg.k_start * d + h * dh),
                        d as isize,
                        1,
                        S::one(),
                        dq.data_mut().as_mut_ptr().add(sg.q_start * d + h * dh),
                        d as isize,
                        1,
                    );
                    // dK_h += scale dS^T Q_h
                    S::gemm(
                        kl,
                        ql,
                        dh,
                        scale,
                        ds.data().as_ptr(),
                        1,
                        kl as isize,
                        qv.data().as_ptr().add(sg.q_start * d + h * dh),
                        d as isize,
                        1,
                        S::one(),
                        dk.data_mut().as_mut_ptr().add(sg.k_start * d + h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        accumulate(grads, st.q, dq);
        accumulate(grads, st.k, dk);
        accumulate(grads, st.v, dvv);
        if let (Some(dt), Some(b)) = (dtable, st.bias) {
            accumulate(grads, b.table, dt);
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[inline]
fn offset_index(i: usize, j: usize, max_offset: usize) -> usize {
    let m = max_offset as isize;
    let off = (j as isize - i as isize).clamp(-m, m);
    (off + m) as usize
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = S::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `tanh` through a single `exp`; the libm version is several times slower.
#[inline]
fn fast_tanh<S: Scalar>(x: S) -> S {
    S::one() - s::<S>(2.0) / (S::one() + (x + x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let inner = s::<S>(GELU_C) * (x + s::<S>(0.044715) * x * x * x);
    s::<S>(0.5) * x * (S::one() + fast_tanh(inner))
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let x2 = x * x;
    let inner = s::<S>(GELU_C) * (x + s::<S>(0.044715) * x2 * x);
    let t = fast_tanh(inner);
    let dinner = s::<S>(GELU_C) * (S::one() + s::<S>(3.0 * 0.044715) * x2);
    s::<S>(0.5) * (S::one() + t) + s::<S>(0.5) * x * (S::one() - t * t) * dinner
}

/// Attention probabilities for one head of one segment, without a tape.
/// Exposed for inspecting attention rows.
pub fn attention_probs<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, segment: AttnSegment, heads: usize, head: usize) -> Tensor<S> {
    let d = q.cols();
    let dh = d / heads;
    let scale = S::one() / s::<S>(dh as f64).sqrt();
    let mut p = Tensor::from_fn(segment.q_len, segment.k_len, |i, j| {
        let qi = &q.row(segment.q_start + i)[head * dh..(head + 1) * dh];
        let kj = &k.row(segment.k_start + j)[head * dh..(head + 1) * dh];
        qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<S>() * scale
    });
    for i in 0..segment.q_len {
        softmax_in_place(p.row_mut(i));
    }
    p
}
