//! Learnable vertex queries, intra-node / inter-node attention blocks and the
//! residual refinement of the reference frame's Gaussians.
//!
//! Every block is pre-norm residual: `q ← q + Wo·attn(LN(q))`, then
//! `q ← q + FFN(LN(q))`. Intra-node blocks attend from each vertex query to
//! the embedded Gaussians of its group (all frames); inter-node blocks attend
//! to the normalized queries of the vertex's mesh neighborhood, all read from
//! the same pre-update snapshot. Vertices with an empty group skip the intra
//! block entirely.
//!
//! Forward passes can record a [`Tape`] which [`backward`] consumes.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::HumanGaussianGraph;
use crate::types::{pack_raw, GaussianPrimitive, FEATURE_CHANNELS, RAW_CHANNELS};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    /// Token width `D`.
    pub dim: usize,
    /// Number of stacked (intra, inter) block pairs `L`.
    pub layers: usize,
    pub heads: usize,
    /// Use the key projection for values as well.
    pub share_kv: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { dim: 64, layers: 6, heads: 1, share_kv: false }
    }
}

impl GraphConfig {
    pub fn check(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "token width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Affine map `y = x·Wᵀ + b` with `W: out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Array2::zeros((output, input)), b: Array1::zeros(output) }
    }

    /// Weights drawn from `N(0, 1/fan_in)`, zero bias.
    pub fn random(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (input as f64).sqrt()).expect("positive std");
        Self {
            w: Array2::from_shape_simple_fn((output, input), || normal.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `∂/∂x`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &dy.t().dot(x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gain: Array1::ones(dim), bias: Array1::zeros(dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { gain: Array1::zeros(dim), bias: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, NormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *inv;
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &NormCache, dy: &ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gain;
        for ((mut row, xhat), inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let mean = row.sum() / d;
            let proj = row.dot(&xhat) / d;
            Zip::from(&mut row).and(&xhat).for_each(|g, &h| *g = inv * (*g - mean - h * proj));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Query, key and value projections of one attention operation.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl Projections {
    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { wq: Linear::random(dim, dim, rng), wk: Linear::random(dim, dim, rng), wv: Linear::random(dim, dim, rng) }
    }

    fn zeros(dim: usize) -> Self {
        Self { wq: Linear::zeros(dim, dim), wk: Linear::zeros(dim, dim), wv: Linear::zeros(dim, dim) }
    }

    fn value(&self, share_kv: bool) -> &Linear {
        if share_kv {
            &self.wk
        } else {
            &self.wv
        }
    }

    fn value_grad(grad: &mut Projections, share_kv: bool) -> &mut Linear {
        if share_kv {
            &mut grad.wk
        } else {
            &mut grad.wv
        }
    }
}

/// Pre-norm attention sub-block followed by a pre-norm feed-forward
/// sub-block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub proj: Projections,
    pub wo: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn_up: Linear,
    pub ffn_down: Linear,
}

impl AttentionBlock {
    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            proj: Projections::random(dim, rng),
            wo: Linear::random(dim, dim, rng),
            ffn_norm: LayerNorm::new(dim),
            ffn_up: Linear::random(dim, 4 * dim, rng),
            ffn_down: Linear::random(4 * dim, dim, rng),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            norm: LayerNorm::zeros(dim),
            proj: Projections::zeros(dim),
            wo: Linear::zeros(dim, dim),
            ffn_norm: LayerNorm::zeros(dim),
            ffn_up: Linear::zeros(dim, 4 * dim),
            ffn_down: Linear::zeros(4 * dim, dim),
        }
    }

    /// Zeroes both residual branches so the block is the identity.
    pub fn zero_residual(&mut self) {
        self.wo.w.fill(0.0);
        self.wo.b.fill(0.0);
        self.ffn_down.w.fill(0.0);
        self.ffn_down.b.fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub intra: AttentionBlock,
    pub inter: AttentionBlock,
}

/// All trainable state. The same structure doubles as a gradient and as
/// optimizer moment storage.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams {
    pub config: GraphConfig,
    /// One learnable query per template vertex, `N × D`.
    pub queries: Array2<f64>,
    /// Features (11) → token.
    pub embed: Linear,
    pub layers: Vec<LayerParams>,
    pub refine: Projections,
    /// Token → raw parameter delta (14).
    pub decoder: Linear,
}

impl GraphParams {
    /// Queries from `N(0, 0.02²)`, projections from `N(0, 1/fan_in)`, zero
    /// biases and a zero decoder.
    pub fn init(config: &GraphConfig, n_vertices: usize, seed: u64) -> Result<Self> {
        config.check()?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, QUERY_INIT_STD).expect("positive std");
        let queries = Array2::from_shape_simple_fn((n_vertices, d), || normal.sample(&mut rng));
        let embed = Linear::random(FEATURE_CHANNELS, d, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams { intra: AttentionBlock::random(d, &mut rng), inter: AttentionBlock::random(d, &mut rng) })
            .collect();
        let refine = Projections::random(d, &mut rng);
        Ok(Self { config: config.clone(), queries, embed, layers, refine, decoder: Linear::zeros(d, RAW_CHANNELS) })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let d = self.config.dim;
        Self {
            config: self.config.clone(),
            queries: Array2::zeros(self.queries.raw_dim()),
            embed: Linear::zeros(FEATURE_CHANNELS, d),
            layers: (0..self.layers.len())
                .map(|_| LayerParams { intra: AttentionBlock::zeros(d), inter: AttentionBlock::zeros(d) })
                .collect(),
            refine: Projections::zeros(d),
            decoder: Linear::zeros(d, RAW_CHANNELS),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.queries.nrows()
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        out.push(("queries".to_string(), self.queries.shape().to_vec(), self.queries.as_slice().expect("standard layout")));
        push_linear(&mut out, "embed", &self.embed);
        for (l, layer) in self.layers.iter().enumerate() {
            push_block(&mut out, &format!("layer{l}.intra"), &layer.intra);
            push_block(&mut out, &format!("layer{l}.inter"), &layer.inter);
        }
        push_projections(&mut out, "refine", &self.refine);
        push_linear(&mut out, "decoder", &self.decoder);
        out
    }

    /// Mutable slices in the order of [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.queries.as_slice_mut().expect("standard layout"));
        push_linear_mut(&mut out, &mut self.embed);
        for layer in &mut self.layers {
            push_block_mut(&mut out, &mut layer.intra);
            push_block_mut(&mut out, &mut layer.inter);
        }
        push_projections_mut(&mut out, &mut self.refine);
        push_linear_mut(&mut out, &mut self.decoder);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named_tensors().into_iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length");
    }

    /// Rebuilds parameters from named tensors (as stored on disk). Every
    /// expected tensor must be present with the expected shape.
    pub fn from_named(config: &GraphConfig, n_vertices: usize, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut params = Self::init(config, n_vertices, 0)?.zeros_like();
        let expected: Vec<(String, Vec<usize>)> =
            params.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let mut flat = Vec::with_capacity(params.n_params());
        for (name, shape) in &expected {
            let (_, got_shape, data) = tensors
                .iter()
                .find(|t| &t.0 == name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if got_shape != shape {
                return Err(Error::Format(format!("tensor {name} has shape {got_shape:?}, expected {shape:?}")));
            }
            flat.extend_from_slice(data);
        }
        params.assign_flat(&flat);
        if !params.is_finite() {
            return Err(Error::NonFiniteInput("parameters".into()));
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

    /// Zeroes every output projection, FFN output layer and the decoder.
    pub fn zero_residuals(&mut self) {
        for layer in &mut self.layers {
            layer.intra.zero_residual();
            layer.inter.zero_residual();
        }
        self.decoder.w.fill(0.0);
        self.decoder.b.fill(0.0);
    }
}

type Named<'a> = Vec<(String, Vec<usize>, &'a [f64])>;

fn push_linear<'a>(out: &mut Named<'a>, name: &str, l: &'a Linear) {
    out.push((format!("{name}.w"), l.w.shape().to_vec(), l.w.as_slice().expect("standard layout")));
    out.push((format!("{name}.b"), l.b.shape().to_vec(), l.b.as_slice().expect("standard layout")));
}

fn push_norm<'a>(out: &mut Named<'a>, name: &str, n: &'a LayerNorm) {
    out.push((format!("{name}.gain"), n.gain.shape().to_vec(), n.gain.as_slice().expect("standard layout")));
    out.push((format!("{name}.bias"), n.bias.shape().to_vec(), n.bias.as_slice().expect("standard layout")));
}

fn push_projections<'a>(out: &mut Named<'a>, name: &str, p: &'a Projections) {
    push_linear(out, &format!("{name}.q"), &p.wq);
    push_linear(out, &format!("{name}.k"), &p.wk);
    push_linear(out, &format!("{name}.v"), &p.wv);
}

fn push_block<'a>(out: &mut Named<'a>, name: &str, b: &'a AttentionBlock) {
    push_norm(out, &format!("{name}.norm"), &b.norm);
    push_projections(out, name, &b.proj);
    push_linear(out, &format!("{name}.o"), &b.wo);
    push_norm(out, &format!("{name}.ffn_norm"), &b.ffn_norm);
    push_linear(out, &format!("{name}.ffn_up"), &b.ffn_up);
    push_linear(out, &format!("{name}.ffn_down"), &b.ffn_down);
}

fn push_linear_mut<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut Linear) {
    out.push(l.w.as_slice_mut().expect("standard layout"));
    out.push(l.b.as_slice_mut().expect("standard layout"));
}

fn push_norm_mut<'a>(out: &mut Vec<&'a mut [f64]>, n: &'a mut LayerNorm) {
    out.push(n.gain.as_slice_mut().expect("standard layout"));
    out.push(n.bias.as_slice_mut().expect("standard layout"));
}

fn push_projections_mut<'a>(out: &mut Vec<&'a mut [f64]>, p: &'a mut Projections) {
    push_linear_mut(out, &mut p.wq);
    push_linear_mut(out, &mut p.wk);
    push_linear_mut(out, &mut p.wv);
}

fn push_block_mut<'a>(out: &mut Vec<&'a mut [f64]>, b: &'a mut AttentionBlock) {
    push_norm_mut(out, &mut b.norm);
    push_projections_mut(out, &mut b.proj);
    push_linear_mut(out, &mut b.wo);
    push_norm_mut(out, &mut b.ffn_norm);
    push_linear_mut(out, &mut b.ffn_up);
    push_linear_mut(out, &mut b.ffn_down);
}

/// Current vertex queries and the number of layers applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryState {
    pub queries: Array2<f64>,
    pub layer: usize,
}

impl QueryState {
    pub fn initial(params: &GraphParams) -> Self {
        Self { queries: params.queries.clone(), layer: 0 }
    }
}

/// Output of [`attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct Attended {
    pub output: Array1<f64>,
    /// Softmax weights, one row per head.
    pub weights: Vec<Vec<f64>>,
}

/// Scaled dot-product attention of already-projected rows.
/// `probs` receives `heads × |rows|` weights.
fn attend(
    qp: ArrayView1<f64>,
    kp: &Array2<f64>,
    vp: &Array2<f64>,
    rows: &[usize],
    heads: usize,
    out: &mut [f64],
    probs: &mut Vec<f64>,
) {
    let d = qp.len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    probs.clear();
    probs.resize(heads * rows.len(), 0.0);
    out.fill(0.0);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let q = qp.slice(s![cols.clone()]);
        let p = &mut probs[h * rows.len()..(h + 1) * rows.len()];
        let mut max = f64::NEG_INFINITY;
        for (pj, &j) in p.iter_mut().zip(rows) {
            *pj = q.dot(&kp.slice(s![j, cols.clone()])) * scale;
            max = max.max(*pj);
        }
        let mut total = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            total += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= total;
        }
        for (&pj, &j) in p.iter().zip(rows) {
            for (o, v) in out[cols.clone()].iter_mut().zip(vp.slice(s![j, cols.clone()])) {
                *o += pj * v;
            }
        }
    }
}

/// Reverse of [`attend`]: accumulates into `dqp` (the query row) and the
/// rows of `dkp`/`dvp`.
#[allow(clippy::too_many_arguments)]
fn attend_backward(
    qp: ArrayView1<f64>,
    kp: &Array2<f64>,
    vp: &Array2<f64>,
    rows: &[usize],
    heads: usize,
    probs: &[f64],
    dout: ArrayView1<f64>,
    dqp: &mut [f64],
    dkp: &mut Array2<f64>,
    dvp: &mut Array2<f64>,
) {
    let d = qp.len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dp = vec![0.0; rows.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let p = &probs[h * rows.len()..(h + 1) * rows.len()];
        let dout_h = dout.slice(s![cols.clone()]);
        let mut weighted = 0.0;
        for ((dpj, &pj), &j) in dp.iter_mut().zip(p).zip(rows) {
            *dpj = dout_h.dot(&vp.slice(s![j, cols.clone()]));
            weighted += pj * *dpj;
            let mut dv = dvp.slice_mut(s![j, cols.clone()]);
            dv.scaled_add(pj, &dout_h);
        }
        let q = qp.slice(s![cols.clone()]);
        for ((&dpj, &pj), &j) in dp.iter().zip(p).zip(rows) {
            let ds = pj * (dpj - weighted) * scale;
            if ds == 0.0 {
                continue;
            }
            for (dq, k) in dqp[cols.clone()].iter_mut().zip(kp.slice(s![j, cols.clone()])) {
                *dq += ds * k;
            }
            dkp.slice_mut(s![j, cols.clone()]).scaled_add(ds, &q);
        }
    }
}

/// Single-query attention: `softmax((Wq q)(Wk K)ᵀ/√d_h)·(Wv V)` per head,
/// heads concatenated.
pub fn attention(
    query: ArrayView1<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    proj: &Projections,
    heads: usize,
    share_kv: bool,
) -> Result<Attended> {
    if keys.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    if keys.nrows() != values.nrows() {
        return Err(Error::DimensionMismatch(format!("{} keys but {} values", keys.nrows(), values.nrows())));
    }
    let d = proj.wq.w.nrows();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{d} channels cannot be split into {heads} heads")));
    }
    let qp = proj.wq.forward(&query.insert_axis(Axis(0)));
    let kp = proj.wk.forward(&keys);
    let vp = proj.value(share_kv).forward(&values);
    let rows: Vec<usize> = (0..keys.nrows()).collect();
    let mut output = Array1::zeros(d);
    let mut probs = Vec::new();
    attend(qp.row(0), &kp, &vp, &rows, heads, output.as_slice_mut().expect("contiguous"), &mut probs);
    let weights = probs.chunks(rows.len()).map(|c| c.to_vec()).collect();
    Ok(Attended { output, weights })
}

/// Parameter gradient of `dout · attention(query, keys, keys)`.
pub fn attention_gradient(
    query: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    proj: &Projections,
    heads: usize,
    share_kv: bool,
    dout: ArrayView1<f64>,
) -> (Projections, Array2<f64>) {
    let d = proj.wq.w.nrows();
    let qp = proj.wq.forward(&query);
    let kp = proj.wk.forward(&keys);
    let vp = proj.value(share_kv).forward(&keys);
    let rows: Vec<usize> = (0..keys.nrows()).collect();
    let mut out = vec![0.0; d];
    let mut probs = Vec::new();
    attend(qp.row(0), &kp, &vp, &rows, heads, &mut out, &mut probs);
    let mut dq = vec![0.0; d];
    let mut dkp = Array2::zeros(kp.raw_dim());
    let mut dvp = Array2::zeros(vp.raw_dim());
    attend_backward(qp.row(0), &kp, &vp, &rows, heads, &probs, dout, &mut dq, &mut dkp, &mut dvp);
    let mut grad = Projections::zeros(d);
    let dqp = ArrayView1::from(&dq[..]).insert_axis(Axis(0)).to_owned();
    let _ = proj.wq.backward(&query, &dqp.view(), &mut grad.wq);
    let mut dkeys = proj.wk.backward(&keys, &dkp.view(), &mut grad.wk);
    dkeys += &proj.value(share_kv).backward(&keys, &dvp.view(), Projections::value_grad(&mut grad, share_kv));
    (grad, dkeys)
}

/// Row indices (in flattened `(t, m)` order) of every vertex's Gaussian
/// group.
pub fn token_groups(graph: &HumanGaussianGraph) -> Vec<Vec<usize>> {
    let offsets = graph.frame_offsets();
    graph.groups.iter().map(|g| g.iter().map(|&(t, m)| offsets[t] + m).collect()).collect()
}

/// Features of every Gaussian of every frame, `(M·T) × 11`.
pub fn gaussian_features(graph: &HumanGaussianGraph) -> Array2<f64> {
    let rows: Vec<[f64; FEATURE_CHANNELS]> =
        graph.frames.iter().flat_map(|f| f.gaussians.iter().map(|g| g.features())).collect();
    let mut out = Array2::zeros((rows.len(), FEATURE_CHANNELS));
    for (mut r, f) in out.rows_mut().into_iter().zip(&rows) {
        r.assign(&ArrayView1::from(&f[..]));
    }
    out
}

/// Embedded Gaussian tokens, `(M·T) × D`.
pub fn embed_gaussian_tokens(graph: &HumanGaussianGraph, params: &GraphParams) -> Array2<f64> {
    params.embed.forward(&gaussian_features(graph).view())
}

/// Everything one block's backward pass needs.
#[derive(Clone, Debug)]
pub struct BlockCache {
    norm: NormCache,
    qn: Array2<f64>,
    qp: Array2<f64>,
    kp: Array2<f64>,
    vp: Array2<f64>,
    probs: Vec<Vec<f64>>,
    attn: Array2<f64>,
    active: Vec<bool>,
    ffn_norm: NormCache,
    ffn_in: Array2<f64>,
    hidden: Array2<f64>,
    act: Array2<f64>,
}

enum KeySource<'a> {
    Tokens(&'a Array2<f64>),
    NormalizedQueries,
}

fn mask_rows(x: &mut Array2<f64>, active: &[bool]) {
    for (mut row, &a) in x.rows_mut().into_iter().zip(active) {
        if !a {
            row.fill(0.0);
        }
    }
}

fn block_forward(
    block: &AttentionBlock,
    config: &GraphConfig,
    queries: &Array2<f64>,
    source: KeySource,
    groups: &[Vec<usize>],
) -> (Array2<f64>, BlockCache) {
    let (qn, norm) = block.norm.forward(&queries.view());
    let qp = block.proj.wq.forward(&qn.view());
    let src = match source {
        KeySource::Tokens(t) => t.view(),
        KeySource::NormalizedQueries => qn.view(),
    };
    let kp = block.proj.wk.forward(&src);
    let vp = block.proj.value(config.share_kv).forward(&src);
    let d = config.dim;
    let active: Vec<bool> = groups.iter().map(|g| !g.is_empty()).collect();
    let results: Vec<(Vec<f64>, Vec<f64>)> = groups
        .par_iter()
        .enumerate()
        .map(|(n, rows)| {
            let mut out = vec![0.0; d];
            let mut probs = Vec::new();
            if !rows.is_empty() {
                attend(qp.row(n), &kp, &vp, rows, config.heads, &mut out, &mut probs);
            }
            (out, probs)
        })
        .collect();
    let mut attn = Array2::zeros((queries.nrows(), d));
    let mut probs = Vec::with_capacity(results.len());
    for (mut row, (out, p)) in attn.rows_mut().into_iter().zip(results) {
        row.assign(&ArrayView1::from(&out[..]));
        probs.push(p);
    }
    let mut branch = block.wo.forward(&attn.view());
    mask_rows(&mut branch, &active);
    let ffn_in = queries + &branch;
    let (hn, ffn_norm) = block.ffn_norm.forward(&ffn_in.view());
    let hidden = block.ffn_up.forward(&hn.view());
    let act = hidden.mapv(gelu);
    let mut ffn_out = block.ffn_down.forward(&act.view());
    mask_rows(&mut ffn_out, &active);
    let out = &ffn_in + &ffn_out;
    let cache = BlockCache { norm, qn, qp, kp, vp, probs, attn, active, ffn_norm, ffn_in: hn, hidden, act };
    (out, cache)
}

/// Returns `∂/∂queries` and, for token-keyed blocks, `∂/∂tokens`.
fn block_backward(
    block: &AttentionBlock,
    config: &GraphConfig,
    queries: &Array2<f64>,
    tokens: Option<&Array2<f64>>,
    groups: &[Vec<usize>],
    cache: &BlockCache,
    dout: &Array2<f64>,
    grad: &mut AttentionBlock,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut dffn = dout.clone();
    mask_rows(&mut dffn, &cache.active);
    let dact = block.ffn_down.backward(&cache.act.view(), &dffn.view(), &mut grad.ffn_down);
    let dhidden = dact * &cache.hidden.mapv(gelu_grad);
    let dhn = block.ffn_up.backward(&cache.ffn_in.view(), &dhidden.view(), &mut grad.ffn_up);
    let dmid = dout + &block.ffn_norm.backward(&cache.ffn_norm, &dhn.view(), &mut grad.ffn_norm);

    let mut dbranch = dmid.clone();
    mask_rows(&mut dbranch, &cache.active);
    let dattn = block.wo.backward(&cache.attn.view(), &dbranch.view(), &mut grad.wo);

    let mut dqp = Array2::zeros(cache.qp.raw_dim());
    let mut dkp = Array2::zeros(cache.kp.raw_dim());
    let mut dvp = Array2::zeros(cache.vp.raw_dim());
    for (n, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let mut dq = vec![0.0; config.dim];
        attend_backward(
            cache.qp.row(n),
            &cache.kp,
            &cache.vp,
            rows,
            config.heads,
            &cache.probs[n],
            dattn.row(n),
            &mut dq,
            &mut dkp,
            &mut dvp,
        );
        dqp.row_mut(n).assign(&ArrayView1::from(&dq[..]));
    }
    let mut dqn = block.proj.wq.backward(&cache.qn.view(), &dqp.view(), &mut grad.proj.wq);
    let src = tokens.map(|t| t.view()).unwrap_or_else(|| cache.qn.view());
    let mut dsrc = block.proj.wk.backward(&src, &dkp.view(), &mut grad.proj.wk);
    let value = block.proj.value(config.share_kv);
    dsrc += &value.backward(&src, &dvp.view(), Projections::value_grad(&mut grad.proj, config.share_kv));
    let dtokens = if tokens.is_some() {
        Some(dsrc)
    } else {
        dqn += &dsrc;
        None
    };
    let _ = queries;
    let dq = dmid + &block.norm.backward(&cache.norm, &dqn.view(), &mut grad.norm);
    (dq, dtokens)
}

/// One intra-node block: every vertex with a non-empty group attends to its
/// Gaussian tokens.
pub fn intra_node_update(
    state: &QueryState,
    groups: &[Vec<usize>],
    tokens: &Array2<f64>,
    params: &GraphParams,
    layer: usize,
) -> QueryState {
    let (queries, _) =
        block_forward(&params.layers[layer].intra, &params.config, &state.queries, KeySource::Tokens(tokens), groups);
    QueryState { queries, layer: state.layer }
}

/// One inter-node block over the `evv` neighborhoods.
pub fn inter_node_update(state: &QueryState, evv: &[Vec<usize>], params: &GraphParams, layer: usize) -> QueryState {
    let (queries, _) =
        block_forward(&params.layers[layer].inter, &params.config, &state.queries, KeySource::NormalizedQueries, evv);
    QueryState { queries, layer: layer + 1 }
}

/// Recorded forward pass of [`run_blocks`] and [`refine_gaussians`].
#[derive(Clone, Debug)]
pub struct Tape {
    features: Array2<f64>,
    tokens: Array2<f64>,
    groups: Vec<Vec<usize>>,
    /// Input queries of every intra block and every inter block.
    inputs: Vec<(Array2<f64>, Array2<f64>)>,
    caches: Vec<(BlockCache, BlockCache)>,
    final_queries: Array2<f64>,
    refine_values: Array2<f64>,
    refine_out: Array2<f64>,
    bound_vertex: Vec<usize>,
}

fn check_graph(graph: &HumanGaussianGraph, params: &GraphParams) -> Result<()> {
    if params.n_vertices() != graph.n_vertices() {
        return Err(Error::DimensionMismatch(format!(
            "{} queries for a {}-vertex graph",
            params.n_vertices(),
            graph.n_vertices()
        )));
    }
    Ok(())
}

fn run_blocks_recorded(graph: &HumanGaussianGraph, params: &GraphParams) -> Result<(QueryState, Tape)> {
    check_graph(graph, params)?;
    let features = gaussian_features(graph);
    let tokens = params.embed.forward(&features.view());
    let groups = token_groups(graph);
    let mut q = params.queries.clone();
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (mid, intra) = block_forward(&layer.intra, &params.config, &q, KeySource::Tokens(&tokens), &groups);
        let (out, inter) = block_forward(&layer.inter, &params.config, &mid, KeySource::NormalizedQueries, &graph.evv);
        inputs.push((q, mid));
        caches.push((intra, inter));
        q = out;
    }
    let state = QueryState { queries: q.clone(), layer: params.layers.len() };
    let tape = Tape {
        features,
        tokens,
        groups,
        inputs,
        caches,
        final_queries: q,
        refine_values: Array2::zeros((0, 0)),
        refine_out: Array2::zeros((0, 0)),
        bound_vertex: Vec::new(),
    };
    Ok((state, tape))
}

/// Initial queries followed by `L` (intra, inter) block pairs.
pub fn run_blocks(graph: &HumanGaussianGraph, params: &GraphParams) -> Result<QueryState> {
    Ok(run_blocks_recorded(graph, params)?.0)
}

/// Refinement attention outputs: each Gaussian's query is its embedded
/// features, its single key/value the final query of its bound vertex.
fn refine_attention(
    frame: &[GaussianPrimitive],
    evg: &[usize],
    queries: &Array2<f64>,
    params: &GraphParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if evg.len() != frame.len() {
        return Err(Error::DimensionMismatch(format!("{} assignments for {} gaussians", evg.len(), frame.len())));
    }
    if queries.nrows() != params.n_vertices() || queries.ncols() != params.config.dim {
        return Err(Error::DimensionMismatch(format!(
            "query state {:?} does not match parameters ({} × {})",
            queries.shape(),
            params.n_vertices(),
            params.config.dim
        )));
    }
    if let Some(&bad) = evg.iter().find(|&&n| n >= queries.nrows()) {
        return Err(Error::DimensionMismatch(format!("vertex {bad} out of range")));
    }
    let proj = &params.refine;
    let values = proj.value(params.config.share_kv).forward(&queries.view());
    let keys = proj.wk.forward(&queries.view());
    let mut features = Array2::zeros((frame.len(), FEATURE_CHANNELS));
    for (mut row, g) in features.rows_mut().into_iter().zip(frame) {
        row.assign(&ArrayView1::from(&g.features()[..]));
    }
    let qp = proj.wq.forward(&params.embed.forward(&features.view()).view());
    let mut out = Array2::zeros((frame.len(), params.config.dim));
    let mut probs = Vec::new();
    for (m, &n) in evg.iter().enumerate() {
        let mut row = vec![0.0; params.config.dim];
        attend(qp.row(m), &keys, &values, &[n], params.config.heads, &mut row, &mut probs);
        out.row_mut(m).assign(&ArrayView1::from(&row[..]));
    }
    Ok((values, out))
}

fn apply_deltas(frame: &[GaussianPrimitive], deltas: &Array2<f64>) -> Result<Vec<GaussianPrimitive>> {
    frame
        .iter()
        .zip(deltas.rows())
        .map(|(g, d)| {
            let mut raw = g.to_raw();
            for (r, v) in raw.iter_mut().zip(d) {
                *r += v;
            }
            pack_raw(&raw)
        })
        .collect()
}

/// Refined Gaussians: `pack(raw(g) + decoder(attention(embed(g), q_n, q_n)))`
/// with `n` the vertex `g` is attached to.
pub fn refine_gaussians(
    frame: &[GaussianPrimitive],
    evg: &[usize],
    state: &QueryState,
    params: &GraphParams,
) -> Result<Vec<GaussianPrimitive>> {
    let (_, out) = refine_attention(frame, evg, &state.queries, params)?;
    apply_deltas(frame, &params.decoder.forward(&out.view()))
}

/// Graph blocks and refinement of frame `t0` in one pass, with a tape for
/// [`backward`].
pub fn forward(
    graph: &HumanGaussianGraph,
    params: &GraphParams,
    t0: usize,
) -> Result<(Vec<GaussianPrimitive>, Tape)> {
    if t0 >= graph.n_frames() {
        return Err(Error::DimensionMismatch(format!("reference frame {t0} of {}", graph.n_frames())));
    }
    let (state, mut tape) = run_blocks_recorded(graph, params)?;
    let frame = &graph.frames[t0].gaussians;
    let (values, out) = refine_attention(frame, &graph.evg[t0], &state.queries, params)?;
    let refined = apply_deltas(frame, &params.decoder.forward(&out.view()))?;
    tape.refine_values = values;
    tape.refine_out = out;
    tape.bound_vertex = graph.evg[t0].clone();
    Ok((refined, tape))
}

/// Gradient of all parameters given `∂/∂raw` of every refined Gaussian
/// (`M × 14`, the unconstrained channels that were added to).
pub fn backward(params: &GraphParams, tape: &Tape, graph: &HumanGaussianGraph, d_raw: &Array2<f64>) -> GraphParams {
    let mut grad = params.zeros_like();
    let dout = params.decoder.backward(&tape.refine_out.view(), &d_raw.view(), &mut grad.decoder);
    // Singleton softmax: the value row passes straight through.
    let mut dvalues = Array2::zeros(tape.refine_values.raw_dim());
    for (row, &n) in dout.rows().into_iter().zip(&tape.bound_vertex) {
        dvalues.row_mut(n).scaled_add(1.0, &row);
    }
    let value = params.refine.value(params.config.share_kv);
    let mut dq = value.backward(
        &tape.final_queries.view(),
        &dvalues.view(),
        Projections::value_grad(&mut grad.refine, params.config.share_kv),
    );
    let mut dtokens = Array2::zeros(tape.tokens.raw_dim());
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let (intra_in, inter_in) = &tape.inputs[l];
        let (intra_cache, inter_cache) = &tape.caches[l];
        let g = &mut grad.layers[l];
        let (dmid, _) =
            block_backward(&layer.inter, &params.config, inter_in, None, &graph.evv, inter_cache, &dq, &mut g.inter);
        let (dprev, dtok) = block_backward(
            &layer.intra,
            &params.config,
            intra_in,
            Some(&tape.tokens),
            &tape.groups,
            intra_cache,
            &dmid,
            &mut g.intra,
        );
        dtokens += &dtok.expect("token-keyed block");
        dq = dprev;
    }
    params.embed.backward(&tape.features.view(), &dtokens.view(), &mut grad.embed);
    grad.queries = dq;
    grad
}

/// Single-precision dense self-attention of every token against every
/// other token: the all-pairs baseline the grouped intra-node update is
/// measured against. Scores are computed in row chunks so the full score
/// matrix is never materialized. Returns the attended tokens.
pub fn dense_token_attention(tokens: &Array2<f32>, wq: &Array2<f32>, wk: &Array2<f32>, wv: &Array2<f32>) -> Array2<f32> {
    const CHUNK: usize = 256;
    let q = tokens.dot(&wq.t());
    let k = tokens.dot(&wk.t());
    let v = tokens.dot(&wv.t());
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    let mut out = Array2::zeros(q.raw_dim());
    let mut start = 0;
    while start < q.nrows() {
        let end = (start + CHUNK).min(q.nrows());
        let mut scores = q.slice(s![start..end, ..]).dot(&k.t());
        for mut row in scores.rows_mut() {
            let max = row.fold(f32::NEG_INFINITY, |m, &x| m.max(x));
            let mut total = 0.0f32;
            row.mapv_inplace(|x| {
                let e = ((x - max) * scale).exp();
                total += e;
                e
            });
            row /= total;
        }
        out.slice_mut(s![start..end, ..]).assign(&scores.dot(&v));
        start = end;
    }
    out
}
