//! Synthetic stand-ins for the body model and the per-frame Gaussian
//! predictor, plus the brute-force oracles the fast paths are checked
//! against.
//!
//! The oracles here deliberately use nothing but arrays and loops.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::skinning::{bind_gaussians, blended_rotation, joint_transforms, lbs_pose_vertices, repose_gaussians};
use crate::splat::{covariance3d, Image, RenderedImage};
use crate::types::{BodyTemplate, Camera, GaussianFrame, GaussianPrimitive, Joint, Pose, Vec3};

/// Radii of the ellipsoidal body: half-width (x, z) and half-height (y).
const BODY_RADIUS: f64 = 0.35;
const BODY_HALF_HEIGHT: f64 = 0.9;

/// Icosphere with `subdivisions` rounds of midpoint subdivision, stretched
/// along y into an elongated body, with a `n_joints`-joint chain along the
/// major axis. Each vertex is skinned to its two nearest joints with a
/// normalized Gaussian falloff.
pub fn make_body(subdivisions: usize, n_joints: usize) -> BodyTemplate {
    assert!(subdivisions <= 4, "subdivisions must be in [0, 4]");
    assert!(n_joints >= 1, "need at least one joint");
    let (sphere, faces) = icosphere(subdivisions);
    let rest_vertices: Vec<Vec3> = sphere
        .iter()
        .map(|p| Vec3::new(BODY_RADIUS * p.x, BODY_HALF_HEIGHT * p.y, BODY_RADIUS * p.z))
        .collect();
    let span = 0.8 * BODY_HALF_HEIGHT;
    let joints: Vec<Joint> = (0..n_joints)
        .map(|j| {
            let y = if n_joints == 1 { 0.0 } else { -span + 2.0 * span * j as f64 / (n_joints - 1) as f64 };
            Joint { rest: Vec3::new(0.0, y, 0.0), parent: j.checked_sub(1) }
        })
        .collect();
    let spacing = if n_joints == 1 { 1.0 } else { 2.0 * span / (n_joints - 1) as f64 };
    let skin_weights = rest_vertices
        .iter()
        .map(|v| {
            let mut by_distance: Vec<(f64, usize)> =
                joints.iter().enumerate().map(|(j, jt)| ((v - jt.rest).norm(), j)).collect();
            by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nearest = &by_distance[..by_distance.len().min(2)];
            let raw: Vec<f64> =
                nearest.iter().map(|(d, _)| (-(d * d) / (2.0 * spacing * spacing)).exp()).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<(usize, f64)> =
                nearest.iter().zip(&raw).map(|((_, j), w)| (*j, w / total)).collect();
            row.sort_by_key(|(j, _)| *j);
            row
        })
        .collect();
    BodyTemplate { rest_vertices, faces, joints, skin_weights, shape_dirs: None }
}

/// Unit icosphere: 10·4^s + 2 vertices, 20·4^s faces.
pub fn icosphere(subdivisions: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, phi, 0.0), (1.0, phi, 0.0), (-1.0, -phi, 0.0), (1.0, -phi, 0.0),
        (0.0, -1.0, phi), (0.0, 1.0, phi), (0.0, -1.0, -phi), (0.0, 1.0, -phi),
        (phi, 0.0, -1.0), (phi, 0.0, 1.0), (-phi, 0.0, -1.0), (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                vertices.push(((vertices[a] + vertices[b]) / 2.0).normalize());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (vertices, faces)
}

/// Area-weighted vertex normals.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut normals = vec![Vec3::zeros(); vertices.len()];
    for &[a, b, c] in faces {
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        for v in [a, b, c] {
            normals[v] += n;
        }
    }
    normals.iter().map(|n| n.try_normalize(1e-12).unwrap_or_else(Vec3::y)).collect()
}

/// Low-frequency RGB pattern over canonical space.
pub fn procedural_color(p: &Vec3) -> Vec3 {
    Vec3::new(
        0.5 + 0.4 * (4.0 * p.y + 2.5 * p.x).sin(),
        0.5 + 0.4 * (3.0 * p.z - 3.5 * p.y + 1.0).sin(),
        0.5 + 0.4 * (5.0 * p.x + 2.0 * p.z - 2.0).cos(),
    )
}

/// Knobs for [`make_scene_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub frames: usize,
    pub gaussians: usize,
    pub cameras: usize,
    pub image_size: usize,
    /// Azimuth span, in degrees, of the training cameras.
    pub camera_arc: f64,
    pub seed: u64,
    /// Half-extent of the normal offset of each sample from its vertex; the
    /// tangential offset stays within twice this.
    pub jitter: f64,
    /// In-plane standard deviation of each Gaussian.
    pub splat_scale: f64,
    pub opacity: f64,
    /// Contrast the per-frame predictor retains, in `(0, 1]`.
    pub contrast: f64,
    /// Per-Gaussian color noise of the per-frame predictor.
    pub color_noise: f64,
    /// Frame whose Gaussians are refined.
    pub reference_frame: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            gaussians: 512,
            cameras: 4,
            image_size: 48,
            camera_arc: 90.0,
            seed: 7,
            jitter: 0.03,
            splat_scale: 0.07,
            opacity: 0.85,
            contrast: 0.4,
            color_noise: 0.03,
            reference_frame: 0,
        }
    }
}

/// Synthetic multi-frame capture. Frame Gaussians are noisy, low-contrast
/// estimates of a textured avatar; ground truth is the clean avatar (the
/// reference frame's geometry with true colors) re-posed into every frame
/// and rendered by [`oracle_render`].
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub template: BodyTemplate,
    pub poses: Vec<Pose>,
    pub frames: Vec<GaussianFrame>,
    pub cameras: Vec<Camera>,
    /// `gt_images[t][c]`.
    pub gt_images: Vec<Vec<RenderedImage>>,
    /// Clean avatar in the reference frame's pose.
    pub truth: Vec<GaussianPrimitive>,
    pub reference_frame: usize,
    /// Camera excluded from training.
    pub heldout_camera: usize,
    pub seed: u64,
}

/// Smooth joint-angle trajectory: each joint bends about x and z with its
/// own phase; the root sways and turns a little.
pub fn pose_trajectory(n_joints: usize, frames: usize, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let phases: Vec<[f64; 3]> = (0..n_joints)
        .map(|_| [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)])
        .collect();
    (0..frames)
        .map(|t| {
            let s = 2.0 * PI * t as f64 / frames.max(1) as f64;
            let mut pose = Pose::identity(n_joints);
            for (j, ph) in phases.iter().enumerate() {
                pose.theta[j] = if j == 0 {
                    Vec3::new(0.05 * (s + ph[0]).sin(), 0.25 * (s + ph[1]).sin(), 0.05 * (s + ph[2]).sin())
                } else {
                    Vec3::new(0.3 * (s + ph[0]).sin(), 0.1 * (s + ph[1]).sin(), 0.3 * (s + ph[2]).sin())
                };
            }
            pose.root_translation = Vec3::new(0.05 * s.sin(), 0.0, 0.05 * s.cos());
            pose
        })
        .collect()
}

/// Horizontal camera rig aimed at the body center. All but the last camera
/// are spread evenly over a frontal arc of `arc_degrees`; the last one looks
/// at the back, so it sees surface the others barely reach. A single camera
/// faces the front.
pub fn rig_cameras(count: usize, image_size: usize, arc_degrees: f64) -> Vec<Camera> {
    let distance = 3.0;
    let focal = image_size as f64 * distance / 2.4;
    let front = count.saturating_sub(1).max(1);
    (0..count)
        .map(|c| {
            let angle = if count > 1 && c == count - 1 {
                PI
            } else if front == 1 {
                0.0
            } else {
                arc_degrees.to_radians() * (c as f64 / (front - 1) as f64 - 0.5)
            };
            let eye = Vec3::new(distance * angle.sin(), 0.2, distance * angle.cos());
            Camera::look_at(eye, Vec3::zeros(), Vec3::y(), focal, image_size, image_size)
        })
        .collect()
}

struct SurfaceSample {
    vertex: usize,
    canonical: Vec3,
    rotation: UnitQuaternion<f64>,
}

fn sample_surface(template: &BodyTemplate, normals: &[Vec3], cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> SurfaceSample {
    let v = rng.random_range(0..template.n_vertices());
    let n = normals[v];
    let tangent = n.cross(&if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() }).normalize();
    let bitangent = n.cross(&tangent);
    let r = 2.0 * cfg.jitter * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    let offset = tangent * (r * a.cos()) + bitangent * (r * a.sin()) + n * rng.random_range(-cfg.jitter..=cfg.jitter);
    // Flat splat: local z along the normal, random spin about it.
    let align = UnitQuaternion::rotation_between(&Vec3::z(), &n).unwrap_or_else(UnitQuaternion::identity);
    let spin = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), rng.random_range(0.0..2.0 * PI));
    SurfaceSample { vertex: v, canonical: template.rest_vertices[v] + offset, rotation: align * spin }
}

pub fn make_scene(template: &BodyTemplate, frames: usize, gaussians: usize, cameras: usize, seed: u64) -> Result<SyntheticScene> {
    make_scene_with(template, &SceneConfig { frames, gaussians, cameras, seed, ..SceneConfig::default() })
}

pub fn make_scene_with(template: &BodyTemplate, cfg: &SceneConfig) -> Result<SyntheticScene> {
    assert!(cfg.frames >= 1 && cfg.gaussians >= 1 && cfg.cameras >= 1);
    assert!(cfg.reference_frame < cfg.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.color_noise.max(0.0)).expect("finite noise");
    let poses = pose_trajectory(template.n_joints(), cfg.frames, &mut rng);
    let normals = vertex_normals(&template.rest_vertices, &template.faces);
    let scale = Vec3::new(cfg.splat_scale, cfg.splat_scale, 0.3 * cfg.splat_scale);

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut truth = Vec::new();
    for (t, pose) in poses.iter().enumerate() {
        let transforms = joint_transforms(template, pose)?;
        let mut gaussians = Vec::with_capacity(cfg.gaussians);
        for _ in 0..cfg.gaussians {
            let s = sample_surface(template, &normals, cfg, &mut rng);
            let blend = transforms.blend(&template.skin_weights[s.vertex]);
            let center = blend.apply(&s.canonical);
            let rotation = blended_rotation(&blend.rotation) * s.rotation;
            let clean = procedural_color(&s.canonical);
            let observed = clean.map(|c| {
                (0.5 + cfg.contrast * (c - 0.5) + noise.sample(&mut rng)).clamp(0.02, 0.98)
            });
            if t == cfg.reference_frame {
                truth.push(GaussianPrimitive::new(center, cfg.opacity, scale, rotation, clean));
            }
            gaussians.push(GaussianPrimitive::new(center, cfg.opacity, scale, rotation, observed));
        }
        frames.push(GaussianFrame::new(t + 1, gaussians));
    }

    let cameras = rig_cameras(cfg.cameras, cfg.image_size, cfg.camera_arc);
    let reference_pose = &poses[cfg.reference_frame];
    let posed = lbs_pose_vertices(template, reference_pose)?;
    let binding = bind_gaussians(&truth, &posed, template, reference_pose)?;
    let gt_images = poses
        .iter()
        .map(|pose| {
            let avatar = repose_gaussians(&truth, &binding, template, pose)?;
            Ok(cameras.iter().map(|cam| oracle_render(&avatar, cam)).collect())
        })
        .collect::<Result<Vec<Vec<_>>>>()?;

    Ok(SyntheticScene {
        template: template.clone(),
        poses,
        frames,
        heldout_camera: cfg.cameras - 1,
        cameras,
        gt_images,
        truth,
        reference_frame: cfg.reference_frame,
        seed: cfg.seed,
    })
}

/// Exhaustive nearest-vertex search; ties go to the lowest index.
pub fn oracle_nearest(centers: &[Vec3], vertices: &[Vec3]) -> Vec<usize> {
    centers
        .iter()
        .map(|c| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, v) in vertices.iter().enumerate() {
                let d = (c.x - v.x) * (c.x - v.x) + (c.y - v.y) * (c.y - v.y) + (c.z - v.z) * (c.z - v.z);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-vertex breadth-first search on the dense share-a-face adjacency
/// matrix; returns the vertices within `d0` hops, sorted.
pub fn oracle_hops(faces: &[[usize; 3]], n_vertices: usize, d0: usize) -> Vec<Vec<usize>> {
    let mut adjacent = vec![vec![false; n_vertices]; n_vertices];
    for f in faces {
        for &a in f {
            for &b in f {
                if a != b {
                    adjacent[a][b] = true;
                }
            }
        }
    }
    (0..n_vertices)
        .map(|start| {
            let mut dist = vec![usize::MAX; n_vertices];
            dist[start] = 0;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for u in 0..n_vertices {
                    if adjacent[v][u] && dist[u] == usize::MAX {
                        dist[u] = dist[v] + 1;
                        queue.push_back(u);
                    }
                }
            }
            (0..n_vertices).filter(|&u| dist[u] <= d0).collect()
        })
        .collect()
}

/// Reference renderer: every Gaussian evaluated at every pixel, one global
/// depth sort, no footprint bounds, no early termination.
pub fn oracle_render(gaussians: &[GaussianPrimitive], camera: &Camera) -> RenderedImage {
    struct Footprint {
        depth: f64,
        index: usize,
        u: f64,
        v: f64,
        inv: Matrix2<f64>,
        opacity: f64,
        color: Vec3,
    }
    let mut prints: Vec<Footprint> = Vec::new();
    for (index, g) in gaussians.iter().enumerate() {
        let p: Vec3 = camera.rotation * g.center + camera.translation;
        if p.z <= camera.near {
            continue;
        }
        let (x, y, z) = (p.x, p.y, p.z);
        // Rows of the pinhole Jacobian, written out.
        let j = Matrix3::new(
            camera.fx / z, 0.0, -camera.fx * x / (z * z),
            0.0, camera.fy / z, -camera.fy * y / (z * z),
            0.0, 0.0, 0.0,
        );
        let full = j * camera.rotation * covariance3d(&g.scale, &g.rotation) * camera.rotation.transpose() * j.transpose();
        let a = full[(0, 0)] + 0.3;
        let b = 0.5 * (full[(0, 1)] + full[(1, 0)]);
        let c = full[(1, 1)] + 0.3;
        let det = a * c - b * b;
        if det <= 0.0 {
            continue;
        }
        prints.push(Footprint {
            depth: z,
            index,
            u: camera.fx * x / z + camera.cx,
            v: camera.fy * y / z + camera.cy,
            inv: Matrix2::new(c / det, -b / det, -b / det, a / det),
            opacity: g.opacity,
            color: g.color,
        });
    }
    prints.sort_by(|p, q| p.depth.total_cmp(&q.depth).then(p.index.cmp(&q.index)));
    let mut image: RenderedImage = Image::zeros(camera.width, camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            let mut color = Vec3::zeros();
            let mut transmittance = 1.0;
            for f in &prints {
                let dx = px as f64 - f.u;
                let dy = py as f64 - f.v;
                let m = f.inv[(0, 0)] * dx * dx + (f.inv[(0, 1)] + f.inv[(1, 0)]) * dx * dy + f.inv[(1, 1)] * dy * dy;
                let alpha = f.opacity * (-0.5 * m).exp();
                color += f.color * (alpha * transmittance);
                transmittance *= 1.0 - alpha;
            }
            let i = py * camera.width + px;
            image.rgb[i * 3..i * 3 + 3].copy_from_slice(color.as_slice());
            image.alpha[i] = 1.0 - transmittance;
        }
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::{composite_pixel, project_sorted, Fragment};
    use crate::types::validate_template;

    #[test]
    fn icosphere_counts() {
        let b0 = make_body(0, 1);
        assert_eq!((b0.n_vertices(), b0.faces.len()), (12, 20));
        let b1 = make_body(1, 3);
        assert_eq!((b1.n_vertices(), b1.faces.len()), (42, 80));
        let b3 = make_body(3, 3);
        assert_eq!((b3.n_vertices(), b3.faces.len()), (642, 1280));
    }

    #[test]
    fn bodies_validate() {
        for s in 0..=3 {
            for k in [1, 2, 5] {
                let report = validate_template(&make_body(s, k));
                assert!(report.ok, "{:?}", report.issues);
            }
        }
    }

    #[test]
    fn scene_is_deterministic_in_seed() {
        let body = make_body(1, 3);
        let cfg = SceneConfig { frames: 2, gaussians: 30, cameras: 2, image_size: 16, ..SceneConfig::default() };
        let a = make_scene_with(&body, &cfg).unwrap();
        let b = make_scene_with(&body, &cfg).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.gt_images, b.gt_images);
        let c = make_scene_with(&body, &SceneConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn single_frame_scene() {
        let body = make_body(1, 2);
        let cfg = SceneConfig { frames: 1, gaussians: 10, cameras: 3, image_size: 12, ..SceneConfig::default() };
        let scene = make_scene_with(&body, &cfg).unwrap();
        assert_eq!(scene.frames.len(), 1);
        assert_eq!(scene.gt_images.len(), 1);
        assert_eq!(scene.gt_images[0].len(), 3);
    }

    #[test]
    fn samples_stay_near_posed_vertices() {
        let body = make_body(2, 4);
        let cfg = SceneConfig { frames: 4, gaussians: 200, cameras: 1, image_size: 8, ..SceneConfig::default() };
        let scene = make_scene_with(&body, &cfg).unwrap();
        for (frame, pose) in scene.frames.iter().zip(&scene.poses) {
            let posed = lbs_pose_vertices(&body, pose).unwrap();
            let nearest = oracle_nearest(&frame.centers(), &posed);
            for (g, n) in frame.gaussians.iter().zip(nearest) {
                assert!((g.center - posed[n]).norm() <= 3.0 * cfg.jitter);
            }
        }
    }

    #[test]
    fn oracle_nearest_basics() {
        let verts = vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), Vec3::new(-2.0, 0.0, 0.0)];
        assert_eq!(oracle_nearest(&[Vec3::zeros()], &verts), vec![0]);
        assert_eq!(oracle_nearest(&[Vec3::new(0.0, 5.0, 0.0)], &verts[1..]), vec![0]);
    }

    #[test]
    fn oracle_hops_basics() {
        let body = make_body(0, 1);
        assert!(oracle_hops(&body.faces, 12, 0).iter().enumerate().all(|(i, l)| l == &vec![i]));
        assert!(oracle_hops(&[[0, 1, 2]], 3, 1).iter().all(|l| l == &vec![0, 1, 2]));
        // Icosahedron diameter is 3.
        assert!(oracle_hops(&body.faces, 12, 5).iter().all(|l| l.len() == 12));
    }

    #[test]
    fn rig_spans_front_arc_and_backs_onto_last_camera() {
        let cams = rig_cameras(4, 8, 90.0);
        // Camera position is -Rᵀt; azimuth measured from +z toward +x.
        let azimuth = |c: &Camera| {
            let eye = -(c.rotation.transpose() * c.translation);
            eye.x.atan2(eye.z).to_degrees()
        };
        let got: Vec<f64> = cams.iter().map(azimuth).collect();
        for (a, b) in got.iter().zip([-45.0, 0.0, 45.0]) {
            assert!((a - b).abs() < 1e-9, "{got:?}");
        }
        assert!((got[3].abs() - 180.0).abs() < 1e-9);
        assert!(azimuth(&rig_cameras(1, 8, 90.0)[0]).abs() < 1e-9);
    }

    #[test]
    fn oracle_single_splat_is_closed_form() {
        let cam = Camera {
            fx: 20.0, fy: 20.0, cx: 8.0, cy: 8.0,
            rotation: Matrix3::identity(), translation: Vec3::zeros(),
            width: 16, height: 16, near: 0.1,
        };
        let g = GaussianPrimitive::new(Vec3::new(0.0, 0.0, 2.0), 0.6, Vec3::repeat(0.2), UnitQuaternion::identity(), Vec3::new(1.0, 0.5, 0.0));
        let img = oracle_render(&[g], &cam);
        let var = (20.0f64 * 0.2 / 2.0).powi(2) + 0.3;
        for y in 0..16 {
            for x in 0..16 {
                let r2 = ((x as f64 - 8.0).powi(2) + (y as f64 - 8.0).powi(2)) / var;
                let a = 0.6 * (-0.5 * r2).exp();
                assert!((img.alpha_at(x, y) - a).abs() < 1e-12);
                assert!((img.rgb_at(x, y)[1] - 0.5 * a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_agrees_with_exhaustive_compositing() {
        let body = make_body(1, 2);
        let cfg = SceneConfig { frames: 1, gaussians: 40, cameras: 1, image_size: 20, ..SceneConfig::default() };
        let scene = make_scene_with(&body, &cfg).unwrap();
        let cam = &scene.cameras[0];
        let gs = &scene.frames[0].gaussians;
        let oracle = oracle_render(gs, cam);
        let splats = project_sorted(gs, cam);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let frags: Vec<Fragment<f64>> = splats
                    .iter()
                    .map(|s| Fragment { color: s.color.into(), alpha: s.opacity * s.weight(x as f64, y as f64) })
                    .collect();
                let (c, a, _) = composite_pixel(&frags);
                assert!((a - oracle.alpha_at(x, y)).abs() < 1e-5);
                for ch in 0..3 {
                    assert!((c[ch] - oracle.rgb_at(x, y)[ch]).abs() < 1e-5);
                }
            }
        }
    }
}
