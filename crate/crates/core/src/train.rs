//! Image losses, gradient checking, the optimizer and the toy fitting loop.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_graph, HumanGaussianGraph, DEFAULT_D0};
use crate::graphops::{self, attention, GraphConfig, GraphParams, LayerNorm, Linear, Projections};
use crate::skinning::{bind_gaussians, lbs_pose_vertices, repose_gaussians};
use crate::splat::{render, render_as, render_backward, Image, RenderedImage};
use crate::synthlab::{make_body, make_scene_with, SceneConfig, SyntheticScene};
use crate::types::{raw, Camera, GaussianPrimitive, Vec3, RAW_CHANNELS};

pub const PSNR_CAP: f64 = 100.0;

/// External perceptual term (for example a learned image metric). Returns
/// its value and its gradient with respect to the rendered rgb values.
pub trait PerceptualTerm: Send + Sync {
    fn evaluate(&self, rendered: &RenderedImage, gt: &RenderedImage) -> (f64, Vec<f64>);
}

#[derive(Clone)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub perceptual: Option<Arc<dyn PerceptualTerm>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha1: 0.0, alpha2: 1.0, perceptual: None }
    }
}

impl fmt::Debug for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LossConfig")
            .field("alpha1", &self.alpha1)
            .field("alpha2", &self.alpha2)
            .field("perceptual", &self.perceptual.is_some())
            .finish()
    }
}

impl LossConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    fn perceptual(&self) -> Option<&dyn PerceptualTerm> {
        if self.alpha1 > 0.0 {
            self.perceptual.as_deref()
        } else {
            None
        }
    }
}

fn check_same_size<S>(a: &Image<S>, b: &Image<S>) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.rgb.len() != b.rgb.len() || a.alpha.len() != b.alpha.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}×{} image against {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// `MSE(rgb) + alpha1·perceptual + alpha2·MSE(alpha)`.
pub fn loss(rendered: &RenderedImage, gt: &RenderedImage, cfg: &LossConfig) -> Result<f64> {
    check_same_size(rendered, gt)?;
    let mut total = mse(&rendered.rgb, &gt.rgb) + cfg.alpha2 * mse(&rendered.alpha, &gt.alpha);
    if let Some(p) = cfg.perceptual() {
        total += cfg.alpha1 * p.evaluate(rendered, gt).0;
    }
    Ok(total)
}

/// [`loss`] and its gradient with respect to the rendered rgb and alpha.
pub fn loss_with_gradient(
    rendered: &RenderedImage,
    gt: &RenderedImage,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_same_size(rendered, gt)?;
    let n_rgb = rendered.rgb.len().max(1) as f64;
    let n_alpha = rendered.alpha.len().max(1) as f64;
    let mut d_rgb: Vec<f64> = rendered.rgb.iter().zip(&gt.rgb).map(|(r, g)| 2.0 * (r - g) / n_rgb).collect();
    let d_alpha = rendered.alpha.iter().zip(&gt.alpha).map(|(r, g)| cfg.alpha2 * 2.0 * (r - g) / n_alpha).collect();
    let mut total = mse(&rendered.rgb, &gt.rgb) + cfg.alpha2 * mse(&rendered.alpha, &gt.alpha);
    if let Some(p) = cfg.perceptual() {
        let (value, grad) = p.evaluate(rendered, gt);
        total += cfg.alpha1 * value;
        for (d, g) in d_rgb.iter_mut().zip(grad) {
            *d += cfg.alpha1 * g;
        }
    }
    Ok((total, d_rgb, d_alpha))
}

/// `10·log10(1 / MSE(rgb))`, capped at [`PSNR_CAP`].
pub fn psnr(img: &RenderedImage, gt: &RenderedImage) -> Result<f64> {
    check_same_size(img, gt)?;
    let m = mse(&img.rgb, &gt.rgb);
    Ok(if m <= 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn name(&self) -> &str;
    /// Evaluation point.
    fn params(&self) -> Vec<f64>;
    fn value(&self, params: &[f64]) -> f64;
    fn gradient(&self, params: &[f64]) -> Vec<f64>;
    /// Whether value and gradient are computed in single precision.
    fn single_precision(&self) -> bool {
        false
    }
}

/// Central finite differences against the analytic gradient. Returns
/// `max_i |analytic_i − numeric_i| / max(max_i |numeric_i|, 1e-8)`.
pub fn grad_check(op: &dyn Differentiable, eps: f64) -> Result<f64> {
    assert!(eps > 0.0, "step must be positive");
    let p0 = op.params();
    let analytic = op.gradient(&p0);
    if analytic.len() != p0.len() {
        return Err(Error::DimensionMismatch(format!("{}: gradient length {}", op.name(), analytic.len())));
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(op.name().to_string()));
    }
    let mut p = p0.clone();
    let mut numeric = Vec::with_capacity(p0.len());
    for i in 0..p0.len() {
        p[i] = p0[i] + eps;
        let up = op.value(&p);
        p[i] = p0[i] - eps;
        let down = op.value(&p);
        p[i] = p0[i];
        let n = (up - down) / (2.0 * eps);
        if !n.is_finite() {
            return Err(Error::NonFiniteGradient(format!("{} (numeric)", op.name())));
        }
        numeric.push(n);
    }
    let scale = numeric.iter().fold(0.0f64, |m, n| m.max(n.abs())).max(1e-8);
    Ok(analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale)
}

/// Weighted sum of an array, the scalar most checks reduce to.
fn weighted_sum(x: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (x * w).sum()
}

fn random_array(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

struct LinearCheck {
    layer: Linear,
    input: Array2<f64>,
    weights: Array2<f64>,
}

impl LinearCheck {
    fn new(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = Linear::random(input, output, &mut rng);
        layer.b = ndarray::Array1::from_shape_simple_fn(output, || rng.random_range(-1.0..1.0));
        Self { layer, input: random_array(6, input, &mut rng), weights: random_array(6, output, &mut rng) }
    }

    fn with(&self, p: &[f64]) -> (Linear, Array2<f64>) {
        let mut layer = self.layer.clone();
        let nw = layer.w.len();
        let nb = layer.b.len();
        layer.w.as_slice_mut().unwrap().copy_from_slice(&p[..nw]);
        layer.b.as_slice_mut().unwrap().copy_from_slice(&p[nw..nw + nb]);
        let x = Array2::from_shape_vec(self.input.raw_dim(), p[nw + nb..].to_vec()).unwrap();
        (layer, x)
    }
}

impl Differentiable for LinearCheck {
    fn name(&self) -> &str {
        "embedder"
    }
    fn params(&self) -> Vec<f64> {
        self.layer.w.iter().chain(&self.layer.b).chain(&self.input).copied().collect()
    }
    fn value(&self, p: &[f64]) -> f64 {
        let (layer, x) = self.with(p);
        weighted_sum(&layer.forward(&x.view()), &self.weights)
    }
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let (layer, x) = self.with(p);
        let mut grad = Linear::zeros(x.ncols(), layer.w.nrows());
        let dx = layer.backward(&x.view(), &self.weights.view(), &mut grad);
        grad.w.iter().chain(&grad.b).chain(&dx).copied().collect()
    }
}

struct NormCheck {
    norm: LayerNorm,
    input: Array2<f64>,
    weights: Array2<f64>,
}

impl NormCheck {
    fn with(&self, p: &[f64]) -> (LayerNorm, Array2<f64>) {
        let d = self.norm.gain.len();
        let mut norm = self.norm.clone();
        norm.gain.as_slice_mut().unwrap().copy_from_slice(&p[..d]);
        norm.bias.as_slice_mut().unwrap().copy_from_slice(&p[d..2 * d]);
        (norm, Array2::from_shape_vec(self.input.raw_dim(), p[2 * d..].to_vec()).unwrap())
    }
}

impl Differentiable for NormCheck {
    fn name(&self) -> &str {
        "layer_norm"
    }
    fn params(&self) -> Vec<f64> {
        self.norm.gain.iter().chain(&self.norm.bias).chain(&self.input).copied().collect()
    }
    fn value(&self, p: &[f64]) -> f64 {
        let (norm, x) = self.with(p);
        weighted_sum(&norm.forward(&x.view()).0, &self.weights)
    }
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let (norm, x) = self.with(p);
        let (_, cache) = norm.forward(&x.view());
        let mut grad = LayerNorm::zeros(norm.gain.len());
        let dx = norm.backward(&cache, &self.weights.view(), &mut grad);
        grad.gain.iter().chain(&grad.bias).chain(&dx).copied().collect()
    }
}

/// Whole pipeline on a small graph: blocks, refinement and decoder, with a
/// fixed random weighting of the refined raw channels as the objective.
pub struct PipelineCheck {
    name: String,
    graph: HumanGaussianGraph,
    params: GraphParams,
    weights: Array2<f64>,
}

impl PipelineCheck {
    pub fn new(name: &str, config: GraphConfig, gaussians_per_frame: usize, seed: u64) -> Self {
        let body = make_body(0, 2);
        let scene_cfg = SceneConfig {
            frames: 2,
            gaussians: gaussians_per_frame,
            cameras: 1,
            image_size: 4,
            seed,
            ..SceneConfig::default()
        };
        let scene = make_scene_with(&body, &scene_cfg).expect("synthetic scene");
        let graph = build_graph(scene.frames, scene.poses, scene.template, 1).expect("graph");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = GraphParams::init(&config, graph.n_vertices(), seed).expect("valid config");
        // Non-trivial decoder and norms so every path carries gradient.
        params.decoder = Linear::random(config.dim, RAW_CHANNELS, &mut rng);
        let mut flat = params.to_flat();
        for v in flat.iter_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        params.assign_flat(&flat);
        let weights = random_array(gaussians_per_frame, RAW_CHANNELS, &mut rng);
        Self { name: name.to_string(), graph, params, weights }
    }

    fn with(&self, p: &[f64]) -> GraphParams {
        let mut params = self.params.clone();
        params.assign_flat(p);
        params
    }
}

impl Differentiable for PipelineCheck {
    fn name(&self) -> &str {
        &self.name
    }
    fn params(&self) -> Vec<f64> {
        self.params.to_flat()
    }
    fn value(&self, p: &[f64]) -> f64 {
        let params = self.with(p);
        let run = graphops::run_blocks(&self.graph, &params).expect("forward");
        let frame = &self.graph.frames[0].gaussians;
        let refined = refined_raw(frame, &self.graph.evg[0], &run, &params);
        weighted_sum(&refined, &self.weights)
    }
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let params = self.with(p);
        let (_, tape) = graphops::forward(&self.graph, &params, 0).expect("forward");
        graphops::backward(&params, &tape, &self.graph, &self.weights).to_flat()
    }
}

/// `raw(g) + decoder(attention(...))` before activation.
fn refined_raw(
    frame: &[GaussianPrimitive],
    evg: &[usize],
    state: &graphops::QueryState,
    params: &GraphParams,
) -> Array2<f64> {
    let mut out = Array2::zeros((frame.len(), RAW_CHANNELS));
    for (m, g) in frame.iter().enumerate() {
        let token = params.embed.forward(&ArrayView1::from(&g.features()[..]).insert_axis(Axis(0)));
        let q = state.queries.row(evg[m]).insert_axis(Axis(0)).to_owned();
        let a = attention(token.row(0), q.view(), q.view(), &params.refine, params.config.heads, params.config.share_kv)
            .expect("singleton");
        let delta = params.decoder.forward(&a.output.view().insert_axis(Axis(0)));
        for c in 0..RAW_CHANNELS {
            out[(m, c)] = g.to_raw()[c] + delta[(0, c)];
        }
    }
    out
}

/// Attention with `keys` rows, differentiated with respect to all three
/// projections through the graph machinery: a single-vertex graph whose
/// group holds the key rows.
struct AttentionCheck {
    name: String,
    proj: Projections,
    query: Array2<f64>,
    keys: Array2<f64>,
    weights: Array2<f64>,
}

impl AttentionCheck {
    fn new(name: &str, group: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proj = Projections {
            wq: Linear::random(4, 4, &mut rng),
            wk: Linear::random(4, 4, &mut rng),
            wv: Linear::random(4, 4, &mut rng),
        };
        for l in [&mut proj.wq, &mut proj.wk, &mut proj.wv] {
            l.b = ndarray::Array1::from_shape_simple_fn(4, || rng.random_range(-0.5..0.5));
        }
        Self {
            name: name.to_string(),
            proj,
            query: random_array(1, 4, &mut rng),
            keys: random_array(group, 4, &mut rng),
            weights: random_array(1, 4, &mut rng),
        }
    }

    fn with(&self, p: &[f64]) -> Projections {
        let mut proj = self.proj.clone();
        let mut offset = 0;
        for l in [&mut proj.wq, &mut proj.wk, &mut proj.wv] {
            for t in [l.w.as_slice_mut().unwrap(), l.b.as_slice_mut().unwrap()] {
                t.copy_from_slice(&p[offset..offset + t.len()]);
                offset += t.len();
            }
        }
        proj
    }
}

impl Differentiable for AttentionCheck {
    fn name(&self) -> &str {
        &self.name
    }
    fn params(&self) -> Vec<f64> {
        [&self.proj.wq, &self.proj.wk, &self.proj.wv]
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied().collect::<Vec<_>>())
            .collect()
    }
    fn value(&self, p: &[f64]) -> f64 {
        let proj = self.with(p);
        let a = attention(self.query.row(0), self.keys.view(), self.keys.view(), &proj, 1, false).expect("non-empty");
        a.output.dot(&self.weights.row(0))
    }
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let proj = self.with(p);
        let (g, _) = graphops::attention_gradient(
            self.query.view(),
            self.keys.view(),
            &proj,
            1,
            false,
            self.weights.row(0),
        );
        [&g.wq, &g.wk, &g.wv].iter().flat_map(|l| l.w.iter().chain(&l.b).copied().collect::<Vec<_>>()).collect()
    }
}

/// Which Gaussian attributes a render check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderTarget {
    Opacity,
    Color,
    Both,
}

/// Render + loss against a fixed target image, as a function of Gaussian
/// opacities and/or colors.
pub struct RenderCheck {
    name: String,
    gaussians: Vec<GaussianPrimitive>,
    camera: Camera,
    gt: RenderedImage,
    target: RenderTarget,
    single: bool,
}

impl RenderCheck {
    pub fn new(name: &str, count: usize, size: usize, target: RenderTarget, single: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let camera = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), size as f64 * 1.5, size, size);
        let random_gaussian = |rng: &mut ChaCha8Rng| {
            GaussianPrimitive::new(
                Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.5..0.5)),
                rng.random_range(0.2..0.9),
                Vec3::new(rng.random_range(0.1..0.3), rng.random_range(0.1..0.3), rng.random_range(0.1..0.3)),
                nalgebra::UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random()),
                Vec3::new(rng.random(), rng.random(), rng.random()),
            )
        };
        let gaussians: Vec<_> = (0..count).map(|_| random_gaussian(&mut rng)).collect();
        let targets: Vec<_> = (0..count).map(|_| random_gaussian(&mut rng)).collect();
        let gt = render(&targets, &camera);
        Self { name: name.to_string(), gaussians, camera, gt, target, single }
    }

    fn with(&self, p: &[f64]) -> Vec<GaussianPrimitive> {
        let mut gs = self.gaussians.clone();
        let mut it = p.iter();
        for g in gs.iter_mut() {
            if self.target != RenderTarget::Color {
                g.opacity = *it.next().unwrap();
            }
            if self.target != RenderTarget::Opacity {
                for c in 0..3 {
                    g.color[c] = *it.next().unwrap();
                }
            }
        }
        gs
    }

    fn loss_f32(&self, gs: &[GaussianPrimitive]) -> (f32, Vec<f32>, Vec<f32>) {
        let img = render_as::<f32>(gs, &self.camera);
        let gt = self.gt.cast::<f32>();
        let n_rgb = img.rgb.len() as f32;
        let n_alpha = img.alpha.len() as f32;
        let mut value = 0.0f32;
        let d_rgb: Vec<f32> = img
            .rgb
            .iter()
            .zip(&gt.rgb)
            .map(|(r, g)| {
                value += (r - g) * (r - g) / n_rgb;
                2.0 * (r - g) / n_rgb
            })
            .collect();
        let d_alpha: Vec<f32> = img
            .alpha
            .iter()
            .zip(&gt.alpha)
            .map(|(r, g)| {
                value += (r - g) * (r - g) / n_alpha;
                2.0 * (r - g) / n_alpha
            })
            .collect();
        (value, d_rgb, d_alpha)
    }
}

impl Differentiable for RenderCheck {
    fn name(&self) -> &str {
        &self.name
    }
    fn single_precision(&self) -> bool {
        self.single
    }
    fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.gaussians {
            if self.target != RenderTarget::Color {
                out.push(g.opacity);
            }
            if self.target != RenderTarget::Opacity {
                out.extend_from_slice(g.color.as_slice());
            }
        }
        out
    }
    fn value(&self, p: &[f64]) -> f64 {
        let gs = self.with(p);
        if self.single {
            self.loss_f32(&gs).0 as f64
        } else {
            loss(&render(&gs, &self.camera), &self.gt, &LossConfig::default()).expect("same size")
        }
    }
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let gs = self.with(p);
        let (opacity, color): (Vec<f64>, Vec<[f64; 3]>) = if self.single {
            let (_, d_rgb, d_alpha) = self.loss_f32(&gs);
            let g = render_backward::<f32>(&gs, &self.camera, &d_rgb, &d_alpha);
            (
                g.opacity.iter().map(|&v| v as f64).collect(),
                g.color.iter().map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect(),
            )
        } else {
            let img = render(&gs, &self.camera);
            let (_, d_rgb, d_alpha) = loss_with_gradient(&img, &self.gt, &LossConfig::default()).expect("same size");
            let g = render_backward::<f64>(&gs, &self.camera, &d_rgb, &d_alpha);
            (g.opacity, g.color)
        };
        let mut out = Vec::new();
        for (o, c) in opacity.iter().zip(&color) {
            if self.target != RenderTarget::Color {
                out.push(*o);
            }
            if self.target != RenderTarget::Opacity {
                out.extend_from_slice(c);
            }
        }
        out
    }
}

/// Every backward pass in the crate, each wrapped as a small check.
pub fn registered_checks() -> Vec<Box<dyn Differentiable>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let norm = NormCheck {
        norm: LayerNorm {
            gain: ndarray::Array1::from_shape_simple_fn(5, || rng.random_range(0.5..1.5)),
            bias: ndarray::Array1::from_shape_simple_fn(5, || rng.random_range(-0.5..0.5)),
        },
        input: random_array(4, 5, &mut rng),
        weights: random_array(4, 5, &mut rng),
    };
    vec![
        Box::new(LinearCheck::new(crate::types::FEATURE_CHANNELS, 6, 1)),
        Box::new(norm),
        Box::new(AttentionCheck::new("attention", 7, 2)),
        Box::new(AttentionCheck::new("attention_singleton", 1, 3)),
        Box::new(PipelineCheck::new("graph_pipeline", GraphConfig { dim: 4, layers: 2, heads: 1, share_kv: false }, 12, 4)),
        Box::new(PipelineCheck::new(
            "graph_pipeline_two_heads_shared_kv",
            GraphConfig { dim: 4, layers: 1, heads: 2, share_kv: true },
            10,
            6,
        )),
        Box::new(RenderCheck::new("render_color_opacity", 6, 16, RenderTarget::Both, false, 7)),
        Box::new(RenderCheck::new("render_opacity_f32", 6, 16, RenderTarget::Opacity, true, 8)),
        Box::new(RenderCheck::new("render_color_f32", 6, 16, RenderTarget::Color, true, 9)),
    ]
}

/// Finite-difference step used for a check: `1e-5` in double precision; in
/// single precision the rendered loss is quadratic in any one opacity or
/// color, so a large step is exact up to rounding.
pub fn default_step(op: &dyn Differentiable) -> f64 {
    if op.single_precision() {
        1e-2
    } else {
        1e-5
    }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` to global norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub frames_per_step: usize,
    pub seed: u64,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub share_kv: bool,
    pub d0: usize,
    /// Held-out PSNR is evaluated every this many steps and after the last.
    pub eval_every: usize,
    pub loss: LossConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            grad_clip: 1.0,
            steps: 300,
            frames_per_step: 8,
            seed: 7,
            layers: 6,
            dim: 64,
            heads: 1,
            share_kv: false,
            d0: DEFAULT_D0,
            eval_every: 10,
            loss: LossConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig { dim: self.dim, layers: self.layers, heads: self.heads, share_kv: self.share_kv }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) || self.frames_per_step == 0 || self.eval_every == 0 {
            return Err(Error::Config("learning rate, clip norm, frames per step and eval interval must be positive".into()));
        }
        self.loss.check()?;
        self.graph_config().check()
    }
}

/// One row of the metric trace. `step` counts completed updates; the loss
/// is measured before the update of that step.
#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub psnr_heldout: Option<f64>,
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("step,loss,psnr_heldout\n");
    for p in trace {
        let psnr = p.psnr_heldout.map(|v| format!("{v:.17e}")).unwrap_or_default();
        out.push_str(&format!("{},{:.17e},{}\n", p.step, p.loss, psnr));
    }
    out
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub initial: GraphParams,
    pub params: GraphParams,
    pub trace: Vec<TracePoint>,
}

impl FitResult {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map(|p| p.loss).unwrap_or(f64::NAN)
    }

    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map(|p| p.loss).unwrap_or(f64::NAN)
    }

    pub fn final_psnr(&self) -> Option<f64> {
        self.trace.iter().rev().find_map(|p| p.psnr_heldout)
    }
}

/// Graph over all frames of the scene.
pub fn scene_graph(scene: &SyntheticScene, d0: usize) -> Result<HumanGaussianGraph> {
    build_graph(scene.frames.clone(), scene.poses.clone(), scene.template.clone(), d0)
}

/// Refined reference-frame Gaussians for trained parameters.
pub fn refine_scene(graph: &HumanGaussianGraph, params: &GraphParams, t0: usize) -> Result<Vec<GaussianPrimitive>> {
    Ok(graphops::forward(graph, params, t0)?.0)
}

/// Re-poses refined Gaussians (bound in the reference pose) into `pose`.
pub fn animate(
    refined: &[GaussianPrimitive],
    graph: &HumanGaussianGraph,
    t0: usize,
    pose: &crate::types::Pose,
) -> Result<Vec<GaussianPrimitive>> {
    let source = &graph.poses[t0];
    let posed = lbs_pose_vertices(&graph.template, source)?;
    let binding = bind_gaussians(refined, &posed, &graph.template, source)?;
    repose_gaussians(refined, &binding, &graph.template, pose)
}

fn heldout_psnr(scene: &SyntheticScene, graph: &HumanGaussianGraph, refined: &[GaussianPrimitive]) -> Result<f64> {
    let cam = &scene.cameras[scene.heldout_camera];
    let mut total = 0.0;
    for (t, pose) in scene.poses.iter().enumerate() {
        let posed = animate(refined, graph, scene.reference_frame, pose)?;
        total += psnr(&render(&posed, cam), &scene.gt_images[t][scene.heldout_camera])?;
    }
    Ok(total / scene.poses.len() as f64)
}

/// Loss over the sampled training views and its gradient with respect to the
/// unconstrained channels of every refined Gaussian.
fn views_loss(
    scene: &SyntheticScene,
    graph: &HumanGaussianGraph,
    refined: &[GaussianPrimitive],
    frames: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    let cameras: Vec<usize> = (0..scene.cameras.len()).filter(|&c| c != scene.heldout_camera).collect();
    let count = (frames.len() * cameras.len()) as f64;
    let mut total = 0.0;
    let mut d_opacity = vec![0.0; refined.len()];
    let mut d_color = vec![[0.0; 3]; refined.len()];
    for &t in frames {
        let posed = animate(refined, graph, scene.reference_frame, &scene.poses[t])?;
        for &c in &cameras {
            let cam = &scene.cameras[c];
            let img = render(&posed, cam);
            let (value, d_rgb, d_alpha) = loss_with_gradient(&img, &scene.gt_images[t][c], cfg)?;
            total += value / count;
            let g = render_backward::<f64>(&posed, cam, &d_rgb, &d_alpha);
            for m in 0..refined.len() {
                d_opacity[m] += g.opacity[m] / count;
                for k in 0..3 {
                    d_color[m][k] += g.color[m][k] / count;
                }
            }
        }
    }
    // Chain through the sigmoid activations.
    let mut d_raw = Array2::zeros((refined.len(), RAW_CHANNELS));
    for (m, g) in refined.iter().enumerate() {
        d_raw[(m, raw::OPACITY)] = d_opacity[m] * g.opacity * (1.0 - g.opacity);
        for k in 0..3 {
            d_raw[(m, raw::COLOR + k)] = d_color[m][k] * g.color[k] * (1.0 - g.color[k]);
        }
    }
    Ok((total, d_raw))
}

/// Trains the graph parameters on the scene's training cameras; the
/// held-out camera is only used for evaluation. The Gaussian source is
/// frozen.
pub fn fit_toy(scene: &SyntheticScene, cfg: &FitConfig) -> Result<FitResult> {
    cfg.check()?;
    if scene.cameras.len() < 2 || scene.heldout_camera >= scene.cameras.len() {
        return Err(Error::Config("fitting needs at least two cameras, one of them held out".into()));
    }
    let graph = scene_graph(scene, cfg.d0)?;
    let initial = GraphParams::init(&cfg.graph_config(), graph.n_vertices(), cfg.seed)?;
    let mut params = initial.clone();
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let n_frames = scene.frames.len();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (refined, tape) = graphops::forward(&graph, &params, scene.reference_frame)?;
        let frames: Vec<usize> = if n_frames <= cfg.frames_per_step {
            (0..n_frames).collect()
        } else {
            let mut f = sample(&mut rng, n_frames, cfg.frames_per_step).into_vec();
            f.sort_unstable();
            f
        };
        let (value, d_raw) = views_loss(scene, &graph, &refined, &frames, &cfg.loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let evaluate = step % cfg.eval_every == 0 || step == cfg.steps;
        let psnr_heldout = if evaluate { Some(heldout_psnr(scene, &graph, &refined)?) } else { None };
        trace.push(TracePoint { step, loss: value, psnr_heldout });
        if step == cfg.steps {
            break;
        }
        let mut grad = graphops::backward(&params, &tape, &graph, &d_raw).to_flat();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: value });
        }
        clip_global_norm(&mut grad, cfg.grad_clip);
        adam.step(&mut flat, &grad);
        params.assign_flat(&flat);
    }
    Ok(FitResult { initial, params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(w: usize, h: usize, v: f64, a: f64) -> RenderedImage {
        Image { width: w, height: h, rgb: vec![v; w * h * 3], alpha: vec![a; w * h] }
    }

    #[test]
    fn loss_of_identical_images_is_zero() {
        let a = constant(4, 3, 0.3, 0.7);
        assert_eq!(loss(&a, &a, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn alpha_only_difference() {
        let a = constant(4, 3, 0.3, 0.7);
        let b = constant(4, 3, 0.3, 0.8);
        assert!((loss(&a, &b, &LossConfig::default()).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand_img = || Image {
            width: 5,
            height: 4,
            rgb: (0..60).map(|_| rng.random::<f64>()).collect(),
            alpha: (0..20).map(|_| rng.random::<f64>()).collect(),
        };
        let (a, b) = (rand_img(), rand_img());
        let cfg = LossConfig { alpha2: 0.7, ..LossConfig::default() };
        let mut rgb = 0.0;
        for i in 0..60 {
            rgb += (a.rgb[i] - b.rgb[i]).powi(2);
        }
        let mut alpha = 0.0;
        for i in 0..20 {
            alpha += (a.alpha[i] - b.alpha[i]).powi(2);
        }
        assert!((loss(&a, &b, &cfg).unwrap() - (rgb / 60.0 + 0.7 * alpha / 20.0)).abs() < 1e-12);
        let pure = LossConfig { alpha1: 0.0, alpha2: 0.0, perceptual: None };
        assert!((loss(&a, &b, &pure).unwrap() - rgb / 60.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let a = constant(4, 3, 0.3, 0.7);
        let b = constant(3, 4, 0.3, 0.7);
        assert!(matches!(loss(&a, &b, &LossConfig::default()), Err(Error::DimensionMismatch(_))));
        assert!(matches!(psnr(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    struct ConstantTerm;

    impl PerceptualTerm for ConstantTerm {
        fn evaluate(&self, r: &RenderedImage, _: &RenderedImage) -> (f64, Vec<f64>) {
            (2.0, vec![0.0; r.rgb.len()])
        }
    }

    #[test]
    fn perceptual_plugin_used_only_with_weight() {
        let a = constant(2, 2, 0.3, 0.7);
        let on = LossConfig { alpha1: 0.5, alpha2: 1.0, perceptual: Some(Arc::new(ConstantTerm)) };
        assert_eq!(loss(&a, &a, &on).unwrap(), 1.0);
        let off = LossConfig { alpha1: 0.0, ..on };
        assert_eq!(loss(&a, &a, &off).unwrap(), 0.0);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = constant(4, 4, 0.5, 1.0);
        let b = constant(4, 4, 0.0, 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &b).unwrap() - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n <= 1.0 + 1e-12);
        let mut small = vec![0.1, 0.2];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.2]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[2.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn double_precision_checks_pass() {
        for op in registered_checks().iter().filter(|o| !o.single_precision()) {
            let err = grad_check(op.as_ref(), 1e-5).unwrap();
            assert!(err < 1e-6, "{}: {err}", op.name());
        }
    }

    #[test]
    fn single_precision_checks_pass() {
        for op in registered_checks().iter().filter(|o| o.single_precision()) {
            let err = grad_check(op.as_ref(), default_step(op.as_ref())).unwrap();
            assert!(err < 1e-3, "{}: {err}", op.name());
        }
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let body = make_body(1, 3);
        let cfg = SceneConfig { frames: 2, gaussians: 40, cameras: 2, image_size: 12, ..SceneConfig::default() };
        let scene = make_scene_with(&body, &cfg).unwrap();
        let fit = FitConfig { steps: 0, dim: 8, layers: 1, ..FitConfig::default() };
        let out = fit_toy(&scene, &fit).unwrap();
        assert_eq!(out.params, out.initial);
        assert_eq!(out.trace.len(), 1);
        assert!(out.trace[0].psnr_heldout.is_some());
    }

    #[test]
    fn short_fit_reduces_loss_and_is_deterministic() {
        let body = make_body(1, 3);
        let cfg = SceneConfig { frames: 2, gaussians: 80, cameras: 3, image_size: 16, ..SceneConfig::default() };
        let scene = make_scene_with(&body, &cfg).unwrap();
        let fit = FitConfig { steps: 30, dim: 8, layers: 1, learning_rate: 1e-2, eval_every: 10, ..FitConfig::default() };
        let a = fit_toy(&scene, &fit).unwrap();
        assert!(a.final_loss() < a.initial_loss());
        let b = fit_toy(&scene, &fit).unwrap();
        assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
    }

    #[test]
    fn single_camera_scene_rejected() {
        let body = make_body(0, 1);
        let cfg = SceneConfig { frames: 1, gaussians: 10, cameras: 1, image_size: 8, ..SceneConfig::default() };
        let scene = make_scene_with(&body, &cfg).unwrap();
        assert!(matches!(fit_toy(&scene, &FitConfig { dim: 4, ..FitConfig::default() }), Err(Error::Config(_))));
    }
}
