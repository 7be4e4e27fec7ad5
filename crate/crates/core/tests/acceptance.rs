//! Acceptance suite. Runs every criterion at its stated tolerance on a
//! single worker thread and prints one PASS/FAIL line per criterion; exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use hgg::graph::{build_graph, face_hop_neighbors, nearest_vertex_assign};
use hgg::graphops::{
    attention, forward, intra_node_update, run_blocks, embed_gaussian_tokens, refine_gaussians, token_groups,
    GraphConfig, GraphParams, Linear, Projections, QueryState,
};
use hgg::interface::{bench_csv, bench_csv_invariant, cmd_bench, cmd_gradcheck, BenchConfig, BenchRow};
use hgg::skinning::{joint_transforms, lbs_pose_vertices};
use hgg::splat::render;
use hgg::synthlab::{
    icosphere, make_body, make_scene_with, oracle_hops, oracle_nearest, oracle_render, SceneConfig, SyntheticScene,
};
use hgg::train::{fit_toy, trace_csv, FitConfig, FitResult};
use hgg::types::Vec3;
use hgg::{BodyTemplate, Camera, GaussianPrimitive, Pose};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn random_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn nearest_vertex() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..200 {
        let n = rng.random_range(1..=500);
        let m = rng.random_range(1..=1000);
        let mut vertices: Vec<Vec3> = (0..n).map(|_| random_vec(&mut rng, 1.0)).collect();
        // Exact duplicates and lattice points exercise the tie rule.
        if case % 4 == 0 {
            for i in 0..n / 5 {
                vertices[n - 1 - i] = vertices[i];
            }
        }
        if case % 4 == 1 {
            for v in &mut vertices {
                *v = v.map(|c| (c * 4.0).round() / 4.0);
            }
        }
        let centers: Vec<Vec3> = (0..m)
            .map(|i| if i % 7 == 0 { vertices[rng.random_range(0..n)] } else { random_vec(&mut rng, 1.2) })
            .collect();
        let fast = nearest_vertex_assign(&centers, &vertices).map_err(|e| e.to_string())?;
        let slow = oracle_nearest(&centers, &vertices);
        ensure(fast == slow, format!("instance {case} (M {m}, N {n}) disagrees"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.2} s"))?;
    Ok(format!("200 instances exact, {secs:.2} s"))
}

fn face_hops() -> Outcome {
    let mut checked = 0;
    for subdivisions in 0..=2 {
        let (verts, faces) = icosphere(subdivisions);
        for d0 in 0..=3 {
            let fast = face_hop_neighbors(&faces, verts.len(), d0);
            let slow = oracle_hops(&faces, verts.len(), d0);
            ensure(fast == slow, format!("subdivision {subdivisions}, d0 {d0} disagrees"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (mesh, d0) pairs exact"))
}

fn random_template(rng: &mut ChaCha8Rng) -> BodyTemplate {
    let mut t = make_body(rng.random_range(0..=2), rng.random_range(2..=6));
    for v in &mut t.rest_vertices {
        *v += random_vec(rng, 0.05);
    }
    let k = t.n_joints();
    for row in &mut t.skin_weights {
        let picks: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..k)).collect();
        let raw: Vec<f64> = picks.iter().map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for (j, w) in picks.into_iter().zip(raw) {
            match merged.iter_mut().find(|(i, _)| *i == j) {
                Some(e) => e.1 += w / total,
                None => merged.push((j, w / total)),
            }
        }
        *row = merged;
    }
    t
}

fn lbs_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_id, mut worst_rigid) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let t = random_template(&mut rng);
        let posed = lbs_pose_vertices(&t, &Pose::identity(t.n_joints())).map_err(|e| e.to_string())?;
        for (a, b) in posed.iter().zip(&t.rest_vertices) {
            worst_id = worst_id.max((a - b).norm());
        }
        let mut pose = Pose::identity(t.n_joints());
        pose.theta[0] = random_vec(&mut rng, 3.0);
        pose.root_translation = random_vec(&mut rng, 2.0);
        let r = Rotation3::new(pose.theta[0]);
        let root = t.joints.iter().position(|j| j.parent.is_none()).expect("root");
        let pivot = t.joints[root].rest;
        let posed = lbs_pose_vertices(&t, &pose).map_err(|e| e.to_string())?;
        for (a, v) in posed.iter().zip(&t.rest_vertices) {
            let expected = r * (v - pivot) + pivot + pose.root_translation;
            worst_rigid = worst_rigid.max((a - expected).norm());
        }
        let jt = joint_transforms(&t, &pose).map_err(|e| e.to_string())?;
        for tr in &jt.0 {
            worst_rigid = worst_rigid.max((tr.rotation - r.matrix()).norm());
        }
    }
    ensure(worst_id < 1e-6, format!("identity error {worst_id:.3e}"))?;
    ensure(worst_rigid < 1e-5, format!("rigid error {worst_rigid:.3e}"))?;
    Ok(format!("identity {worst_id:.1e}, rigid {worst_rigid:.1e} over 50 templates"))
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> GaussianPrimitive {
    GaussianPrimitive::new(
        random_vec(rng, 0.8),
        rng.random_range(0.05..0.95),
        Vec3::new(rng.random_range(0.02..0.3), rng.random_range(0.02..0.3), rng.random_range(0.02..0.3)),
        UnitQuaternion::from_scaled_axis(random_vec(rng, 3.0)),
        Vec3::new(rng.random(), rng.random(), rng.random()),
    )
}

fn renderer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(0..=50);
        let gs: Vec<GaussianPrimitive> = (0..n).map(|_| random_gaussian(&mut rng)).collect();
        let eye = random_vec(&mut rng, 1.0).normalize() * rng.random_range(2.0..4.0);
        let cam = Camera::look_at(eye, random_vec(&mut rng, 0.2), Vec3::y(), rng.random_range(40.0..90.0), 64, 64);
        worst = worst.max(render(&gs, &cam).max_abs_diff(&oracle_render(&gs, &cam)));
    }
    ensure(worst < 1e-5, format!("max per-pixel difference {worst:.3e}"))?;

    let cam = Camera {
        fx: 40.0,
        fy: 40.0,
        cx: 32.0,
        cy: 32.0,
        rotation: Matrix3::identity(),
        translation: Vec3::zeros(),
        width: 64,
        height: 64,
        near: 0.1,
    };
    let (c1, c2) = (Vec3::new(0.9, 0.2, 0.4), Vec3::new(0.1, 0.8, 0.6));
    let splat = |z: f64, c: Vec3| GaussianPrimitive::new(Vec3::new(0.0, 0.0, z), 0.5, Vec3::repeat(0.1), UnitQuaternion::identity(), c);
    // Listed back to front so the depth sort matters.
    let img = render(&[splat(3.0, c2), splat(2.0, c1)], &cam);
    let rgb = img.rgb_at(32, 32);
    let mut err = (img.alpha_at(32, 32) - 0.75).abs();
    for ch in 0..3 {
        err = err.max((rgb[ch] - (0.5 * c1[ch] + 0.25 * c2[ch])).abs());
    }
    ensure(err < 1e-7, format!("two-splat closed form off by {err:.3e}"))?;
    Ok(format!("100 scenes max diff {worst:.2e}; two-splat error {err:.1e}"))
}

fn small_scene(frames: usize, seed: u64) -> Result<SyntheticScene, String> {
    let cfg = SceneConfig { frames, gaussians: 120, cameras: 2, image_size: 16, seed, ..SceneConfig::default() };
    make_scene_with(&make_body(1, 4), &cfg).map_err(|e| e.to_string())
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let d = 8;
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let proj = Projections {
            wq: Linear::random(d, d, &mut rng),
            wk: Linear::random(d, d, &mut rng),
            wv: Linear::random(d, d, &mut rng),
        };
        let g = rng.random_range(1..20);
        let keys = Array2::from_shape_simple_fn((g, d), || rng.random_range(-3.0..3.0));
        let q = ndarray::Array1::from_shape_simple_fn(d, || rng.random_range(-3.0..3.0));
        let att = attention(q.view(), keys.view(), keys.view(), &proj, heads, false).map_err(|e| e.to_string())?;
        for row in &att.weights {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_sum < 1e-6, format!("softmax row sum off by {worst_sum:.3e}"))?;

    let scene = small_scene(3, 11)?;
    let graph = build_graph(scene.frames.clone(), scene.poses.clone(), scene.template.clone(), 1)
        .map_err(|e| e.to_string())?;
    let config = GraphConfig { dim: 16, layers: 2, heads: 2, share_kv: false };
    let mut params = GraphParams::init(&config, graph.n_vertices(), 12).map_err(|e| e.to_string())?;
    params.decoder = Linear::random(16, 14, &mut rng);
    params.decoder.w *= 0.1;
    let tokens = embed_gaussian_tokens(&graph, &params);
    let groups = token_groups(&graph);
    let state = QueryState::initial(&params);
    let base = intra_node_update(&state, &groups, &tokens, &params, 0);
    let mut worst_perm = 0.0f64;
    for _ in 0..10 {
        let shuffled: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.shuffle(&mut rng);
                g
            })
            .collect();
        let other = intra_node_update(&state, &shuffled, &tokens, &params, 0);
        worst_perm = worst_perm.max((&base.queries - &other.queries).iter().fold(0.0, |m, d| m.max(d.abs())));
    }
    ensure(worst_perm < 1e-6, format!("intra permutation difference {worst_perm:.3e}"))?;

    let (refined, _) = forward(&graph, &params, 0).map_err(|e| e.to_string())?;
    let blocks = run_blocks(&graph, &params).map_err(|e| e.to_string())?;
    let mut worst_order = 0.0f64;
    for order in [[2usize, 0, 1], [1, 2, 0], [2, 1, 0]] {
        let permuted = build_graph(
            order.iter().map(|&t| graph.frames[t].clone()).collect(),
            order.iter().map(|&t| graph.poses[t].clone()).collect(),
            graph.template.clone(),
            graph.d0,
        )
        .map_err(|e| e.to_string())?;
        let t0 = order.iter().position(|&t| t == 0).expect("frame 0 present");
        let other = run_blocks(&permuted, &params).map_err(|e| e.to_string())?;
        worst_order = worst_order.max((&blocks.queries - &other.queries).iter().fold(0.0, |m, d| m.max(d.abs())));
        let (refined_p, _) = forward(&permuted, &params, t0).map_err(|e| e.to_string())?;
        for (a, b) in refined.iter().zip(&refined_p) {
            for (x, y) in a.to_raw().iter().zip(b.to_raw().iter()) {
                worst_order = worst_order.max((x - y).abs());
            }
        }
    }
    ensure(worst_order < 1e-5, format!("frame-order difference {worst_order:.3e}"))?;
    Ok(format!("row sums {worst_sum:.1e}, permutation {worst_perm:.1e}, frame order {worst_order:.1e}"))
}

fn zero_init_identity() -> Outcome {
    let scene = small_scene(2, 13)?;
    let graph = build_graph(scene.frames.clone(), scene.poses.clone(), scene.template.clone(), 2)
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (layers, heads) in [(0, 1), (1, 1), (3, 2)] {
        let config = GraphConfig { dim: 8, layers, heads, share_kv: false };
        let mut params = GraphParams::init(&config, graph.n_vertices(), 14).map_err(|e| e.to_string())?;
        params.zero_residuals();
        let state = run_blocks(&graph, &params).map_err(|e| e.to_string())?;
        for t in 0..graph.n_frames() {
            let frame = &graph.frames[t].gaussians;
            let refined = refine_gaussians(frame, &graph.evg[t], &state, &params).map_err(|e| e.to_string())?;
            for (a, b) in refined.iter().zip(frame) {
                worst = worst.max((a.center - b.center).norm());
                worst = worst.max((a.color - b.color).norm());
                worst = worst.max((a.scale - b.scale).norm());
                worst = worst.max((a.opacity - b.opacity).abs());
                worst = worst.max(a.rotation.angle_to(&b.rotation));
            }
        }
    }
    ensure(worst < 1e-7, format!("refined differs from input by {worst:.3e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let rows = cmd_gradcheck().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> =
        rows.iter().filter(|r| !r.passed()).map(|r| format!("{} {:.3e}", r.name, r.error)).collect();
    ensure(failed.is_empty(), format!("over tolerance: {}", failed.join(", ")))?;
    ensure(rows.iter().any(|r| r.single_precision), "no single-precision check registered".into())?;
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    let worst64 = rows.iter().filter(|r| !r.single_precision).map(|r| r.error).fold(0.0, f64::max);
    let worst32 = rows.iter().filter(|r| r.single_precision).map(|r| r.error).fold(0.0, f64::max);
    Ok(format!("{} checks, f64 worst {worst64:.1e}, f32 worst {worst32:.1e}, {secs:.1} s", rows.len()))
}

fn bench_config() -> BenchConfig {
    BenchConfig { gaussians: 4096, vertices: 642, dim: 64, frames: vec![2, 4, 8, 16], reps: 5, seed: 7 }
}

fn complexity(rows: &[BenchRow]) -> Outcome {
    let mut summary = Vec::new();
    for w in rows.windows(2) {
        let hgg = w[1].hgg_ms / w[0].hgg_ms;
        let naive = w[1].naive_ms / w[0].naive_ms;
        summary.push(format!("T{}→{} hgg x{hgg:.2} naive x{naive:.2}", w[0].frames, w[1].frames));
        ensure(hgg <= 2.6, format!("hgg ratio {hgg:.2} at T {}", w[1].frames))?;
        ensure(naive >= 3.0, format!("naive ratio {naive:.2} at T {}", w[1].frames))?;
    }
    Ok(summary.join("; "))
}

struct Ablation {
    deep: FitResult,
    shallow: FitResult,
}

fn run_ablation() -> Result<Ablation, String> {
    let scene = make_scene_with(&make_body(2, 5), &SceneConfig::default()).map_err(|e| e.to_string())?;
    let fit = |layers| fit_toy(&scene, &FitConfig { layers, ..FitConfig::default() }).map_err(|e| e.to_string());
    Ok(Ablation { deep: fit(6)?, shallow: fit(0)? })
}

fn ablation_direction(a: &Ablation) -> Outcome {
    let deep = a.deep.final_psnr().ok_or("no held-out PSNR for L=6")?;
    let shallow = a.shallow.final_psnr().ok_or("no held-out PSNR for L=0")?;
    let ratio = a.deep.final_loss() / a.deep.initial_loss();
    let detail = format!(
        "held-out PSNR L=6 {deep:.3} dB vs L=0 {shallow:.3} dB (gap {:.3}); L=6 loss ratio {ratio:.4}",
        deep - shallow
    );
    ensure(deep - shallow >= 0.5, detail.clone())?;
    ensure(ratio < 0.5, detail.clone())?;
    Ok(detail)
}

fn main() -> ExitCode {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("global pool set once");

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => println!("criterion {name}: FAIL ({detail})"),
        }
        results.push((name, outcome));
    };

    report("1 nearest-vertex oracle", nearest_vertex());
    report("2 face-hop oracle", face_hops());
    report("3 LBS identity and rigid equivariance", lbs_properties());
    report("4 renderer oracle", renderer_oracle());
    report("5 attention invariants", attention_invariants());
    report("6 zero-init identity", zero_init_identity());
    report("7 gradient checks", gradient_checks());

    let start = Instant::now();
    let bench = cmd_bench(&bench_config()).map_err(|e| e.to_string());
    let bench_secs = start.elapsed().as_secs_f64();
    if let Ok(rows) = &bench {
        print!("{}", bench_csv(rows));
    }
    report(
        "8 complexity scaling",
        bench.as_deref().map_err(Clone::clone).and_then(complexity).map(|s| format!("{s}; {bench_secs:.0} s")),
    );

    let start = Instant::now();
    let ablation = run_ablation();
    let fit_secs = start.elapsed().as_secs_f64();
    report(
        "9 ablation direction",
        ablation.as_ref().map_err(Clone::clone).and_then(ablation_direction).map(|s| format!("{s}; {fit_secs:.0} s")),
    );

    let determinism = (|| -> Outcome {
        let first = bench.as_ref().map_err(Clone::clone)?;
        let again = cmd_bench(&bench_config()).map_err(|e| e.to_string())?;
        ensure(bench_csv_invariant(first) == bench_csv_invariant(&again), "bench CSV differs between runs".into())?;
        let first = ablation.as_ref().map_err(Clone::clone)?;
        let again = run_ablation()?;
        ensure(trace_csv(&first.deep.trace) == trace_csv(&again.deep.trace), "L=6 trace CSV differs".into())?;
        ensure(trace_csv(&first.shallow.trace) == trace_csv(&again.shallow.trace), "L=0 trace CSV differs".into())?;
        ensure(first.deep.params == again.deep.params, "L=6 parameters differ".into())?;
        Ok("bench (non-timing columns) and both fit traces bit-identical".into())
    })();
    report("10 determinism", determinism);

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
