//! Pipeline commands behind the `hgg` binary. Each command reads and writes
//! files and returns a small summary for logging and tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::HumanGaussianGraph;
use crate::graphops::{self, dense_token_attention, GraphConfig, GraphParams, QueryState};
use crate::io::{
    graph_to_hggf, params_from_hggf, params_to_hggf, save_png, scene_from_hggf, scene_to_hggf, Hggf, RunConfig,
};
use crate::splat::render;
use crate::synthlab::{make_body, make_scene_with, pose_trajectory, SceneConfig, SyntheticScene};
use crate::train::{animate, default_step, fit_toy, grad_check, refine_scene, registered_checks, trace_csv, FitResult};
pub use crate::train::scene_graph;
use crate::types::Pose;

pub use crate::io::export_ply;

pub const SCENE_FILE: &str = "scene.hggf";

fn require_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        )));
    }
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SyntheticScene> {
    scene_from_hggf(&Hggf::read(path)?)
}

/// Generates the synthetic scene described by `cfg`.
pub fn synth_scene(cfg: &RunConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    make_scene_with(&make_body(cfg.subdivisions, cfg.joints), &cfg.scene)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub scene_path: PathBuf,
    pub frames: usize,
    pub gaussians: usize,
    pub images: usize,
}

/// Writes `scene.hggf` and one ground-truth PNG per (frame, camera) into an
/// existing directory.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<SynthSummary> {
    require_dir(out_dir)?;
    let scene = synth_scene(cfg)?;
    let scene_path = out_dir.join(SCENE_FILE);
    scene_to_hggf(&scene)?.write(&scene_path)?;
    let mut images = 0;
    for (t, row) in scene.gt_images.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            save_png(img, &out_dir.join(format!("gt_f{t:02}_c{c:02}.png")))?;
            images += 1;
        }
    }
    Ok(SynthSummary {
        scene_path,
        frames: scene.frames.len(),
        gaussians: scene.frames.iter().map(|f| f.len()).sum(),
        images,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildSummary {
    pub gaussians: usize,
    pub partition_count: usize,
    pub d0: usize,
}

/// Builds the graph of a scene file and writes its edge tables.
pub fn cmd_build(scene_path: &Path, d0: usize, out_path: &Path) -> Result<BuildSummary> {
    let scene = load_scene(scene_path)?;
    let graph = scene_graph(&scene, d0)?;
    graph_to_hggf(&graph)?.write(out_path)?;
    Ok(BuildSummary { gaussians: graph.n_gaussians(), partition_count: graph.partition_count(), d0 })
}

/// Trains on a scene file; writes parameters (HGGF) and the metric trace
/// (CSV).
pub fn cmd_fit(scene_path: &Path, cfg: &RunConfig, params_out: &Path, csv_out: &Path) -> Result<FitResult> {
    cfg.validate()?;
    let scene = load_scene(scene_path)?;
    let result = fit_toy(&scene, &cfg.fit)?;
    params_to_hggf(&result.params)?.write(params_out)?;
    fs::write(csv_out, trace_csv(&result.trace))?;
    Ok(result)
}

pub fn load_params(path: &Path) -> Result<GraphParams> {
    params_from_hggf(&Hggf::read(path)?)
}

/// Refined Gaussians of a scene under stored parameters.
pub fn refined_gaussians(
    scene: &SyntheticScene,
    params: &GraphParams,
    d0: usize,
) -> Result<(HumanGaussianGraph, Vec<crate::types::GaussianPrimitive>)> {
    let graph = scene_graph(scene, d0)?;
    let refined = refine_scene(&graph, params, scene.reference_frame)?;
    Ok((graph, refined))
}

/// Source of target poses for [`cmd_animate`].
#[derive(Clone, Debug)]
pub enum PoseSource {
    /// The scene's own poses.
    Scene,
    /// `count` poses of a fresh trajectory drawn with `seed`.
    Trajectory { count: usize, seed: u64 },
    Explicit(Vec<Pose>),
}

/// Re-poses the refined Gaussians into every target pose and renders each
/// from one scene camera. Returns the written PNG paths.
pub fn cmd_animate(
    params_path: &Path,
    scene_path: &Path,
    poses: &PoseSource,
    camera: usize,
    d0: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    require_dir(out_dir)?;
    let scene = load_scene(scene_path)?;
    let params = load_params(params_path)?;
    let cam = scene
        .cameras
        .get(camera)
        .ok_or_else(|| Error::DimensionMismatch(format!("camera {camera} of {}", scene.cameras.len())))?;
    let targets = match poses {
        PoseSource::Scene => scene.poses.clone(),
        PoseSource::Trajectory { count, seed } => {
            pose_trajectory(scene.template.n_joints(), *count, &mut ChaCha8Rng::seed_from_u64(*seed))
        }
        PoseSource::Explicit(p) => p.clone(),
    };
    let (graph, refined) = refined_gaussians(&scene, &params, d0)?;
    let mut paths = Vec::with_capacity(targets.len());
    for (i, pose) in targets.iter().enumerate() {
        let posed = animate(&refined, &graph, scene.reference_frame, pose)?;
        let path = out_dir.join(format!("pose_{i:03}.png"));
        save_png(&render(&posed, cam), &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Renders one (frame, camera) view: the raw frame Gaussians, or, with
/// parameters, the refined Gaussians re-posed into that frame.
pub fn cmd_render(
    scene_path: &Path,
    params_path: Option<&Path>,
    frame: usize,
    camera: usize,
    d0: usize,
    out: &Path,
) -> Result<()> {
    let scene = load_scene(scene_path)?;
    if frame >= scene.frames.len() || camera >= scene.cameras.len() {
        return Err(Error::DimensionMismatch(format!(
            "view ({frame}, {camera}) outside {} frames × {} cameras",
            scene.frames.len(),
            scene.cameras.len()
        )));
    }
    let gaussians = match params_path {
        None => scene.frames[frame].gaussians.clone(),
        Some(p) => {
            let params = load_params(p)?;
            let (graph, refined) = refined_gaussians(&scene, &params, d0)?;
            animate(&refined, &graph, scene.reference_frame, &scene.poses[frame])?
        }
    };
    save_png(&render(&gaussians, &scene.cameras[camera]), out)
}

/// Sizes for [`cmd_bench`].
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub gaussians: usize,
    pub vertices: usize,
    pub dim: usize,
    pub frames: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { gaussians: 4096, vertices: 642, dim: 64, frames: vec![2, 4, 8, 16], reps: 5, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub frames: usize,
    pub tokens: usize,
    pub hgg_ms: f64,
    pub naive_ms: f64,
    pub hgg_checksum: f64,
    pub naive_checksum: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("T,tokens,hgg_ms,naive_ms,hgg_checksum,naive_checksum\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.17e},{:.17e}\n",
            r.frames, r.tokens, r.hgg_ms, r.naive_ms, r.hgg_checksum, r.naive_checksum
        ));
    }
    out
}

/// The CSV without its timing columns: the part that must be identical
/// across reruns.
pub fn bench_csv_invariant(rows: &[BenchRow]) -> String {
    let mut out = String::from("T,tokens,hgg_checksum,naive_checksum\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.17e},{:.17e}\n", r.frames, r.tokens, r.hgg_checksum, r.naive_checksum));
    }
    out
}

fn subdivisions_for(vertices: usize) -> Result<usize> {
    (0..=4)
        .find(|&s| 10 * 4usize.pow(s as u32) + 2 == vertices)
        .ok_or_else(|| Error::Config(format!("{vertices} is not an icosphere vertex count (12, 42, 162, 642, 2562)")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times one intra-node update (grouped attention over the graph) against
/// dense all-pairs attention over the same `M·T` tokens, for every `T`.
/// Reports the median of `reps` runs of each.
pub fn cmd_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.reps == 0 || cfg.frames.is_empty() || cfg.gaussians == 0 {
        return Err(Error::Config("bench needs positive sizes and repetitions".into()));
    }
    let body = make_body(subdivisions_for(cfg.vertices)?, 4);
    let gcfg = GraphConfig { dim: cfg.dim, layers: 1, heads: 1, share_kv: false };
    let mut rows = Vec::with_capacity(cfg.frames.len());
    for &t in &cfg.frames {
        let scene_cfg = SceneConfig {
            frames: t,
            gaussians: cfg.gaussians,
            cameras: 1,
            image_size: 1,
            seed: cfg.seed,
            ..SceneConfig::default()
        };
        let scene = make_scene_with(&body, &scene_cfg)?;
        let graph = scene_graph(&scene, 1)?;
        let params = GraphParams::init(&gcfg, graph.n_vertices(), cfg.seed)?;
        let tokens = graphops::embed_gaussian_tokens(&graph, &params);
        let groups = graphops::token_groups(&graph);
        let state = QueryState::initial(&params);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (cfg.dim as f32).sqrt();
        let mut weight = || Array2::from_shape_simple_fn((cfg.dim, cfg.dim), || rng.random_range(-1.0f32..1.0) * scale);
        let (wq, wk, wv) = (weight(), weight(), weight());
        let tokens32 = tokens.mapv(|v| v as f32);

        let mut hgg_times = Vec::with_capacity(cfg.reps);
        let mut naive_times = Vec::with_capacity(cfg.reps);
        let mut hgg_checksum = 0.0;
        let mut naive_checksum = 0.0;
        for _ in 0..cfg.reps {
            let start = Instant::now();
            let out = graphops::intra_node_update(&state, &groups, &tokens, &params, 0);
            hgg_times.push(start.elapsed().as_secs_f64() * 1e3);
            hgg_checksum = out.queries.sum();

            let start = Instant::now();
            let out = dense_token_attention(&tokens32, &wq, &wk, &wv);
            naive_times.push(start.elapsed().as_secs_f64() * 1e3);
            naive_checksum = out.iter().map(|&v| v as f64).sum();
        }
        rows.push(BenchRow {
            frames: t,
            tokens: tokens.nrows(),
            hgg_ms: median(hgg_times),
            naive_ms: median(naive_times),
            hgg_checksum,
            naive_checksum,
        });
    }
    Ok(rows)
}

/// Coefficient of determination of the least-squares line through
/// `(x, y)`.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    1.0 - sse / syy
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub single_precision: bool,
    pub error: f64,
    pub tolerance: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

/// Runs every registered gradient check: tolerance `1e-6` in double
/// precision (step `1e-5`), `1e-3` in single precision.
pub fn cmd_gradcheck() -> Result<Vec<GradcheckRow>> {
    registered_checks()
        .iter()
        .map(|op| {
            let single = op.single_precision();
            Ok(GradcheckRow {
                name: op.name().to_string(),
                single_precision: single,
                error: grad_check(op.as_ref(), default_step(op.as_ref()))?,
                tolerance: if single { 1e-3 } else { 1e-6 },
            })
        })
        .collect()
}
