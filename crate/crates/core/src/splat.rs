//! Software Gaussian splatting.
//!
//! Gaussians are projected with the local affine approximation of the pinhole
//! map, sorted globally by camera depth (source index breaks ties) and
//! composited front to back per pixel:
//! `C = Σ_i c_i α_i Π_{j<i} (1 − α_j)` with `α_i = opacity_i · G_i(pixel)`.
//!
//! Rendering is generic over the pixel scalar so gradient checks can run in
//! single precision; projection is always done in `f64`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, UnitQuaternion, Vector2};
use num_traits::Float;
use rayon::prelude::*;

use crate::types::{Camera, GaussianPrimitive, Vec3};

/// Added to every projected covariance (px²).
pub const COV2D_FLOOR: f64 = 0.3;
/// Compositing stops once transmittance drops below this value.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-6;
/// Splat footprint half-extent in standard deviations. Beyond it the
/// Gaussian falloff is below 1e-8.
pub const FOOTPRINT_SIGMAS: f64 = 6.07;

/// Covariance `R S Sᵀ Rᵀ`.
pub fn covariance3d(scale: &Vec3, rotation: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let r = rotation.to_rotation_matrix().into_inner();
    let s = Matrix3::from_diagonal(scale);
    let m = r * s;
    m * m.transpose()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSplat {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vec3,
    pub source: usize,
    /// Pixel bounding box `[x0, x1] × [y0, y1]` (inclusive, may lie off-image).
    pub bbox: [i64; 4],
}

impl ProjectedSplat {
    /// Gaussian falloff at pixel position `(x, y)`.
    #[inline]
    pub fn weight(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d.x;
        let dy = y - self.mean2d.y;
        let c = &self.conic;
        let power = c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy;
        (-0.5 * power).exp()
    }
}

/// Projects one Gaussian; `None` when its center is not in front of the near
/// plane.
pub fn project_gaussian(g: &GaussianPrimitive, source: usize, camera: &Camera) -> Option<ProjectedSplat> {
    let p = camera.world_to_camera(&g.center);
    if !(p.z > camera.near) {
        return None;
    }
    let inv_z = 1.0 / p.z;
    let mean2d = Vector2::new(camera.fx * p.x * inv_z + camera.cx, camera.fy * p.y * inv_z + camera.cy);
    let jacobian = Matrix2x3::new(
        camera.fx * inv_z, 0.0, -camera.fx * p.x * inv_z * inv_z,
        0.0, camera.fy * inv_z, -camera.fy * p.y * inv_z * inv_z,
    );
    let t = jacobian * camera.rotation;
    let mut cov2d = t * covariance3d(&g.scale, &g.rotation) * t.transpose();
    // Exact symmetry before regularizing.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += COV2D_FLOOR;
    cov2d[(1, 1)] += COV2D_FLOOR;
    let conic = cov2d.try_inverse()?;
    let rx = FOOTPRINT_SIGMAS * cov2d[(0, 0)].sqrt();
    let ry = FOOTPRINT_SIGMAS * cov2d[(1, 1)].sqrt();
    let bbox = [
        (mean2d.x - rx).floor() as i64,
        (mean2d.x + rx).ceil() as i64,
        (mean2d.y - ry).floor() as i64,
        (mean2d.y + ry).ceil() as i64,
    ];
    Some(ProjectedSplat {
        mean2d,
        cov2d,
        conic,
        depth: p.z,
        opacity: g.opacity,
        color: g.color,
        source,
        bbox,
    })
}

/// Projects, culls and sorts by `(depth, source)`.
pub fn project_sorted(gaussians: &[GaussianPrimitive], camera: &Camera) -> Vec<ProjectedSplat> {
    let mut splats: Vec<ProjectedSplat> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, camera))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
    splats
}

/// One splat's contribution at one pixel: color and effective alpha
/// (`opacity · weight`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment<S> {
    pub color: [S; 3],
    pub alpha: S,
}

/// Front-to-back compositing of depth-sorted fragments. Returns the pixel
/// color, alpha and the number of fragments consumed before the
/// transmittance cutoff.
pub fn composite_pixel<S: Float>(fragments: &[Fragment<S>]) -> ([S; 3], S, usize) {
    let cutoff = S::from(TRANSMITTANCE_CUTOFF).unwrap();
    let mut color = [S::zero(); 3];
    let mut transmittance = S::one();
    let mut used = 0;
    for f in fragments {
        let w = f.alpha * transmittance;
        for c in 0..3 {
            color[c] = color[c] + f.color[c] * w;
        }
        transmittance = transmittance * (S::one() - f.alpha);
        used += 1;
        if transmittance < cutoff {
            break;
        }
    }
    (color, S::one() - transmittance, used)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W × 3`.
    pub rgb: Vec<S>,
    /// Row-major `H × W`.
    pub alpha: Vec<S>,
}

pub type RenderedImage = Image<f64>;

impl<S: Float> Image<S> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![S::zero(); width * height * 3],
            alpha: vec![S::zero(); width * height],
        }
    }

    pub fn rgb_at(&self, x: usize, y: usize) -> [S; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> S {
        self.alpha[y * self.width + x]
    }

    pub fn cast<T: Float>(&self) -> Image<T> {
        Image {
            width: self.width,
            height: self.height,
            rgb: self.rgb.iter().map(|v| T::from(*v).unwrap()).collect(),
            alpha: self.alpha.iter().map(|v| T::from(*v).unwrap()).collect(),
        }
    }

    /// Largest absolute difference over every channel.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.rgb
            .iter()
            .zip(&other.rgb)
            .chain(self.alpha.iter().zip(&other.alpha))
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), S::max)
    }
}

/// Splats touching row `y`, in depth order.
fn row_splats(splats: &[ProjectedSplat], y: i64) -> Vec<&ProjectedSplat> {
    splats.iter().filter(|s| s.bbox[2] <= y && y <= s.bbox[3]).collect()
}

fn pixel_fragments<S: Float>(row: &[&ProjectedSplat], x: usize, y: usize, out: &mut Vec<(usize, S, Fragment<S>)>) {
    out.clear();
    let xi = x as i64;
    for s in row {
        if s.bbox[0] <= xi && xi <= s.bbox[1] {
            let w = s.weight(x as f64, y as f64);
            let weight = S::from(w).unwrap();
            let opacity = S::from(s.opacity).unwrap();
            out.push((
                s.source,
                weight,
                Fragment {
                    color: [
                        S::from(s.color.x).unwrap(),
                        S::from(s.color.y).unwrap(),
                        S::from(s.color.z).unwrap(),
                    ],
                    alpha: opacity * weight,
                },
            ));
        }
    }
}

/// Renders with pixel scalar `S`. Background is transparent black.
pub fn render_as<S: Float + Send + Sync>(gaussians: &[GaussianPrimitive], camera: &Camera) -> Image<S> {
    let splats = project_sorted(gaussians, camera);
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<(Vec<S>, Vec<S>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let row = row_splats(&splats, y as i64);
            let mut rgb = vec![S::zero(); w * 3];
            let mut alpha = vec![S::zero(); w];
            let mut frags = Vec::new();
            let mut plain = Vec::new();
            for x in 0..w {
                pixel_fragments::<S>(&row, x, y, &mut frags);
                plain.clear();
                plain.extend(frags.iter().map(|f| f.2));
                let (c, a, _) = composite_pixel(&plain);
                rgb[x * 3..x * 3 + 3].copy_from_slice(&c);
                alpha[x] = a;
            }
            (rgb, alpha)
        })
        .collect();
    let mut image = Image::zeros(w, h);
    for (y, (rgb, alpha)) in rows.into_iter().enumerate() {
        image.rgb[y * w * 3..(y + 1) * w * 3].copy_from_slice(&rgb);
        image.alpha[y * w..(y + 1) * w].copy_from_slice(&alpha);
    }
    image
}

pub fn render(gaussians: &[GaussianPrimitive], camera: &Camera) -> RenderedImage {
    render_as::<f64>(gaussians, camera)
}

/// Gradients of a scalar objective with respect to each Gaussian's color and
/// opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGradients<S> {
    pub color: Vec<[S; 3]>,
    pub opacity: Vec<S>,
}

/// Reverse pass of [`render_as`] for colors and opacities, given the
/// objective's gradient with respect to every rgb and alpha value.
///
/// Per pixel, with transmittance `T_i` in front of fragment `i` and
/// `B_i` the color composited behind it (relative to the light leaving `i`):
/// `∂C/∂c_i = α_i T_i`, `∂C/∂α_i = T_i (c_i − B_i)`, `∂A/∂α_i = T_i (1 − B^α_i)`.
pub fn render_backward<S: Float + Send + Sync>(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    d_rgb: &[S],
    d_alpha: &[S],
) -> SplatGradients<S> {
    let splats = project_sorted(gaussians, camera);
    let (w, h) = (camera.width, camera.height);
    assert_eq!(d_rgb.len(), w * h * 3);
    assert_eq!(d_alpha.len(), w * h);
    // Per-row sparse contributions, reduced in row order for determinism.
    let rows: Vec<Vec<(usize, [S; 4])>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let row = row_splats(&splats, y as i64);
            let mut contributions = Vec::new();
            let mut frags = Vec::new();
            let mut plain = Vec::new();
            let mut prefix = Vec::new();
            for x in 0..w {
                pixel_fragments::<S>(&row, x, y, &mut frags);
                if frags.is_empty() {
                    continue;
                }
                plain.clear();
                plain.extend(frags.iter().map(|f| f.2));
                let (_, _, used) = composite_pixel(&plain);
                prefix.clear();
                let mut t = S::one();
                for f in &plain[..used] {
                    prefix.push(t);
                    t = t * (S::one() - f.alpha);
                }
                let p = y * w + x;
                let g_rgb = [d_rgb[p * 3], d_rgb[p * 3 + 1], d_rgb[p * 3 + 2]];
                let g_alpha = d_alpha[p];
                let mut behind = [S::zero(); 3];
                let mut behind_alpha = S::zero();
                for i in (0..used).rev() {
                    let (source, weight, f) = frags[i];
                    let ti = prefix[i];
                    let mut grad = [S::zero(); 4];
                    let mut d_a = g_alpha * ti * (S::one() - behind_alpha);
                    for c in 0..3 {
                        grad[c] = g_rgb[c] * f.alpha * ti;
                        d_a = d_a + g_rgb[c] * ti * (f.color[c] - behind[c]);
                    }
                    grad[3] = d_a * weight;
                    contributions.push((source, grad));
                    for c in 0..3 {
                        behind[c] = f.color[c] * f.alpha + (S::one() - f.alpha) * behind[c];
                    }
                    behind_alpha = f.alpha + (S::one() - f.alpha) * behind_alpha;
                }
            }
            contributions
        })
        .collect();
    let mut grads = SplatGradients {
        color: vec![[S::zero(); 3]; gaussians.len()],
        opacity: vec![S::zero(); gaussians.len()],
    };
    for row in rows {
        for (source, g) in row {
            for c in 0..3 {
                grads.color[source][c] = grads.color[source][c] + g[c];
            }
            grads.opacity[source] = grads.opacity[source] + g[3];
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlab::oracle_render;
    use nalgebra::{Rotation3, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(size: usize, focal: f64) -> Camera {
        Camera {
            fx: focal,
            fy: focal,
            cx: (size / 2) as f64,
            cy: (size / 2) as f64,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            width: size,
            height: size,
            near: 0.1,
        }
    }

    fn gaussian(center: Vec3, opacity: f64, scale: f64, color: Vec3) -> GaussianPrimitive {
        GaussianPrimitive::new(center, opacity, Vec3::repeat(scale), UnitQuaternion::identity(), color)
    }

    #[test]
    fn covariance_identity_and_diagonal() {
        let id = covariance3d(&Vec3::repeat(1.0), &UnitQuaternion::identity());
        assert!((id - Matrix3::identity()).norm() < 1e-15);
        let d = covariance3d(&Vec3::new(2.0, 1.0, 1.0), &UnitQuaternion::identity());
        assert!((d - Matrix3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))).norm() < 1e-15);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let scale = Vec3::from_fn(|_, _| rng.random_range(0.1..3.0));
            let axis = Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::new(axis));
            let cov = covariance3d(&scale, &q);
            assert!((cov - cov.transpose()).norm() < 1e-12);
            let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            let mut sq: Vec<f64> = scale.iter().map(|s| s * s).collect();
            eig.sort_by(f64::total_cmp);
            sq.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&sq) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn on_axis_center_projects_to_principal_point() {
        let cam = axis_camera(32, 40.0);
        let s = project_gaussian(&gaussian(Vec3::new(0.0, 0.0, 3.0), 0.5, 0.1, Vec3::zeros()), 0, &cam).unwrap();
        assert_eq!(s.mean2d, Vector2::new(16.0, 16.0));
        assert_eq!(s.depth, 3.0);
    }

    #[test]
    fn isotropic_projection_matches_hand_jacobian() {
        let (f, sigma, z) = (50.0, 0.2, 4.0);
        let cam = axis_camera(64, f);
        let s = project_gaussian(&gaussian(Vec3::new(0.0, 0.0, z), 0.5, sigma, Vec3::zeros()), 0, &cam).unwrap();
        let expected = (f * sigma / z).powi(2) + COV2D_FLOOR;
        assert!((s.cov2d - Matrix2::identity() * expected).norm() < 1e-6);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(16, 10.0);
        assert!(project_gaussian(&gaussian(Vec3::new(0.0, 0.0, -1.0), 0.5, 0.1, Vec3::zeros()), 0, &cam).is_none());
        assert!(project_gaussian(&gaussian(Vec3::new(0.0, 0.0, 0.05), 0.5, 0.1, Vec3::zeros()), 0, &cam).is_none());
    }

    #[test]
    fn single_fragment_closed_form() {
        let (a, w) = (0.7, 0.6);
        let (c, alpha, _) = composite_pixel(&[Fragment { color: [0.2, 0.4, 1.0], alpha: a * w }]);
        for (ch, v) in [0.2, 0.4, 1.0].iter().enumerate() {
            assert!((c[ch] - v * a * w).abs() < 1e-15);
        }
        assert!((alpha - a * w).abs() < 1e-15);
    }

    #[test]
    fn two_fragment_closed_form() {
        let c1 = [1.0, 0.0, 0.5];
        let c2 = [0.0, 1.0, 0.25];
        let (c, alpha, _) = composite_pixel(&[Fragment { color: c1, alpha: 0.5 }, Fragment { color: c2, alpha: 0.5 }]);
        for ch in 0..3 {
            assert!((c[ch] - (0.5 * c1[ch] + 0.25 * c2[ch])).abs() < 1e-7);
        }
        assert!((alpha - 0.75).abs() < 1e-7);
    }

    #[test]
    fn compositing_matches_no_early_out_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let n = rng.random_range(0..=50);
            let frags: Vec<Fragment<f64>> = (0..n)
                .map(|_| Fragment {
                    color: [rng.random(), rng.random(), rng.random()],
                    alpha: rng.random::<f64>() * rng.random::<f64>(),
                })
                .collect();
            let (c, a, _) = composite_pixel(&frags);
            // Explicit product form, every term kept.
            let mut rc = [0.0; 3];
            for i in 0..n {
                let mut t = 1.0;
                for f in &frags[..i] {
                    t *= 1.0 - f.alpha;
                }
                for ch in 0..3 {
                    rc[ch] += frags[i].color[ch] * frags[i].alpha * t;
                }
            }
            let ra = 1.0 - frags.iter().map(|f| 1.0 - f.alpha).product::<f64>();
            for ch in 0..3 {
                assert!((c[ch] - rc[ch]).abs() < 1e-5);
            }
            assert!((a - ra).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_scene_is_transparent_black() {
        let img = render(&[], &axis_camera(8, 10.0));
        assert!(img.rgb.iter().chain(&img.alpha).all(|v| *v == 0.0));
    }

    #[test]
    fn on_axis_opaque_gaussian_alpha_equals_opacity() {
        let cam = axis_camera(64, 60.0);
        let img = render(&[gaussian(Vec3::new(0.0, 0.0, 3.0), 0.9, 0.3, Vec3::repeat(1.0))], &cam);
        assert!((img.alpha_at(32, 32) - 0.9).abs() < 1e-3);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianPrimitive> {
        (0..n)
            .map(|_| {
                let axis = Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0));
                GaussianPrimitive::new(
                    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..6.0)),
                    rng.random_range(0.05..1.0),
                    Vec3::from_fn(|_, _| rng.random_range(0.02..0.4)),
                    UnitQuaternion::from_scaled_axis(axis),
                    Vec3::from_fn(|_, _| rng.random()),
                )
            })
            .collect()
    }

    #[test]
    fn fast_render_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cam = axis_camera(32, 30.0);
        for _ in 0..10 {
            let n = rng.random_range(1..=50);
            let scene = random_scene(&mut rng, n);
            let d = render(&scene, &cam).max_abs_diff(&oracle_render(&scene, &cam));
            assert!(d < 1e-5, "max diff {d}");
        }
    }

    #[test]
    fn input_order_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = axis_camera(24, 25.0);
        let scene = random_scene(&mut rng, 30);
        let mut reversed = scene.clone();
        reversed.reverse();
        let a = render(&scene, &cam);
        let b = render(&reversed, &cam);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn adding_a_gaussian_never_lowers_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = axis_camera(24, 25.0);
        let mut scene = random_scene(&mut rng, 20);
        let before = render(&scene, &cam);
        scene.extend(random_scene(&mut rng, 1));
        let after = render(&scene, &cam);
        for (a, b) in before.alpha.iter().zip(&after.alpha) {
            assert!(*b >= *a - 1e-12);
            assert!((0.0..=1.0).contains(b));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cam = axis_camera(16, 16.0);
        let scene = random_scene(&mut rng, 12);
        let d_rgb: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d_alpha: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |s: &[GaussianPrimitive]| {
            let img = render(s, &cam);
            img.rgb.iter().zip(&d_rgb).map(|(a, b)| a * b).sum::<f64>()
                + img.alpha.iter().zip(&d_alpha).map(|(a, b)| a * b).sum::<f64>()
        };
        let grads = render_backward(&scene, &cam, &d_rgb, &d_alpha);
        let eps = 1e-6;
        for i in 0..scene.len() {
            let mut plus = scene.clone();
            let mut minus = scene.clone();
            plus[i].opacity += eps;
            minus[i].opacity -= eps;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            assert!((numeric - grads.opacity[i]).abs() < 1e-6 * (1.0 + numeric.abs()), "{numeric} vs {}", grads.opacity[i]);
            for c in 0..3 {
                let mut plus = scene.clone();
                let mut minus = scene.clone();
                plus[i].color[c] += eps;
                minus[i].color[c] -= eps;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                assert!((numeric - grads.color[i][c]).abs() < 1e-6 * (1.0 + numeric.abs()));
            }
        }
    }
}
