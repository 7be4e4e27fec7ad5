//! Linear blend skinning for template vertices and for Gaussians.
//!
//! A posed point is `Σ_k w_k (G_k x + b_k)`, where `(G_k, b_k)` is the rigid
//! transform of joint `k` from canonical to posed space. Gaussians inherit the
//! weight row of their nearest vertex; re-posing maps a Gaussian through the
//! inverse blended transform of its source pose and then the blended transform
//! of the target pose.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spatial::KdTree;
use crate::types::{joint_order, BodyTemplate, GaussianPrimitive, Pose, SkinRow, Vec3};

/// Rigid transform `x ↦ rotation · x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Per-joint canonical→posed transforms, indexed like the template joints.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransforms(pub Vec<RigidTransform>);

impl JointTransforms {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Weighted sum of the joint transforms. The result is affine but in
    /// general not rigid.
    pub fn blend(&self, weights: &[(usize, f64)]) -> RigidTransform {
        let mut rotation = Matrix3::zeros();
        let mut translation = Vec3::zeros();
        for &(k, w) in weights {
            rotation += self.0[k].rotation * w;
            translation += self.0[k].translation * w;
        }
        RigidTransform { rotation, translation }
    }

    /// Posed location of joint `k`'s rest position.
    pub fn joint_position(&self, template: &BodyTemplate, k: usize) -> Vec3 {
        self.0[k].apply(&template.joints[k].rest)
    }
}

/// Forward kinematics. Joint rotations compose down the parent chain and the
/// root translation is applied last.
pub fn joint_transforms(template: &BodyTemplate, pose: &Pose) -> Result<JointTransforms> {
    let k = template.n_joints();
    if pose.theta.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "pose has {} joint rotations, template has {k} joints",
            pose.theta.len()
        )));
    }
    let order = joint_order(template)
        .ok_or_else(|| Error::InvalidTemplate("joint tree has cycle".into()))?;
    // World rotation and position of each joint.
    let mut world_rot = vec![Matrix3::identity(); k];
    let mut world_pos = vec![Vec3::zeros(); k];
    for &j in &order {
        let local = Rotation3::new(pose.theta[j]).into_inner();
        let rest = template.joints[j].rest;
        match template.joints[j].parent {
            None => {
                world_rot[j] = local;
                world_pos[j] = rest;
            }
            Some(p) => {
                world_rot[j] = world_rot[p] * local;
                world_pos[j] = world_rot[p] * (rest - template.joints[p].rest) + world_pos[p];
            }
        }
    }
    Ok(JointTransforms(
        (0..k)
            .map(|j| RigidTransform {
                rotation: world_rot[j],
                translation: world_pos[j] - world_rot[j] * template.joints[j].rest
                    + pose.root_translation,
            })
            .collect(),
    ))
}

/// Poses every template vertex (shape blend first, then skinning).
pub fn lbs_pose_vertices(template: &BodyTemplate, pose: &Pose) -> Result<Vec<Vec3>> {
    let transforms = joint_transforms(template, pose)?;
    let shaped = template.shaped_vertices(&pose.beta);
    Ok(shaped
        .iter()
        .zip(&template.skin_weights)
        .map(|(v, row)| {
            row.iter().fold(Vec3::zeros(), |acc, &(k, w)| acc + transforms.0[k].apply(v) * w)
        })
        .collect())
}

/// Per-Gaussian skinning data for re-posing.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBinding {
    /// Nearest posed vertex at binding time.
    pub vertex: Vec<usize>,
    /// Skin-weight row copied from the bound vertex.
    pub weights: Vec<SkinRow>,
    /// Canonical-space center minus the (shaped) rest position of the bound
    /// vertex.
    pub canonical_offset: Vec<Vec3>,
    /// Pose the Gaussians were produced in.
    pub source_pose: Pose,
}

impl GaussianBinding {
    pub fn len(&self) -> usize {
        self.vertex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertex.is_empty()
    }
}

/// Binds each Gaussian to its Euclidean-nearest posed vertex (lowest index on
/// ties). `posed_vertices` must be the template posed by `source_pose`.
pub fn bind_gaussians(
    gaussians: &[GaussianPrimitive],
    posed_vertices: &[Vec3],
    template: &BodyTemplate,
    source_pose: &Pose,
) -> Result<GaussianBinding> {
    if gaussians.is_empty() {
        return Err(Error::EmptyFrame);
    }
    if posed_vertices.len() != template.n_vertices() {
        return Err(Error::DimensionMismatch(format!(
            "{} posed vertices for a {}-vertex template",
            posed_vertices.len(),
            template.n_vertices()
        )));
    }
    if posed_vertices.is_empty() {
        return Err(Error::EmptyVertexSet);
    }
    let tree = KdTree::build(posed_vertices);
    let transforms = joint_transforms(template, source_pose)?;
    let shaped = template.shaped_vertices(&source_pose.beta);
    let mut binding = GaussianBinding {
        vertex: Vec::with_capacity(gaussians.len()),
        weights: Vec::with_capacity(gaussians.len()),
        canonical_offset: Vec::with_capacity(gaussians.len()),
        source_pose: source_pose.clone(),
    };
    for (m, g) in gaussians.iter().enumerate() {
        let v = tree.nearest(&g.center).expect("non-empty tree");
        let row = template.skin_weights[v].clone();
        let blended = transforms.blend(&row);
        let inverse = blended.rotation.try_inverse().ok_or(Error::DegenerateBlend(m))?;
        let canonical = inverse * (g.center - blended.translation);
        binding.vertex.push(v);
        binding.canonical_offset.push(canonical - shaped[v]);
        binding.weights.push(row);
    }
    Ok(binding)
}

/// Unit quaternion of a blended (not necessarily orthonormal) rotation block:
/// the trace-based matrix→quaternion map followed by normalization.
pub fn blended_rotation(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let tr = m.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quaternion::new(0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s)
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new((m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s)
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new((m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s)
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quaternion::new((m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s)
    };
    UnitQuaternion::new_normalize(q)
}

/// Re-poses bound Gaussians from the binding's source pose to `pose_dst`.
/// Centers go through `M_dst · M_src⁻¹`, rotations are left-multiplied by
/// `q_dst · q_src⁻¹`; opacity, scale and color are untouched.
pub fn repose_gaussians(
    gaussians: &[GaussianPrimitive],
    binding: &GaussianBinding,
    template: &BodyTemplate,
    pose_dst: &Pose,
) -> Result<Vec<GaussianPrimitive>> {
    if gaussians.len() != binding.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gaussians for a binding of {}",
            gaussians.len(),
            binding.len()
        )));
    }
    let src = joint_transforms(template, &binding.source_pose)?;
    let dst = joint_transforms(template, pose_dst)?;
    gaussians
        .par_iter()
        .zip(binding.weights.par_iter())
        .enumerate()
        .map(|(m, (g, row))| {
            let a = src.blend(row);
            let b = dst.blend(row);
            let inverse = a.rotation.try_inverse().ok_or(Error::DegenerateBlend(m))?;
            let canonical = inverse * (g.center - a.translation);
            let delta = blended_rotation(&b.rotation) * blended_rotation(&a.rotation).inverse();
            Ok(GaussianPrimitive {
                center: b.apply(&canonical),
                rotation: UnitQuaternion::new_normalize(*(delta * g.rotation).quaternion()),
                ..g.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Joint;
    use std::f64::consts::FRAC_PI_2;

    fn chain(n: usize) -> BodyTemplate {
        // Joints along x; one vertex per joint, all in a fan of faces.
        let joints: Vec<Joint> = (0..n)
            .map(|j| Joint { rest: Vec3::new(j as f64, 0.0, 0.0), parent: j.checked_sub(1) })
            .collect();
        let mut rest_vertices: Vec<Vec3> = (0..n).map(|j| Vec3::new(j as f64, 0.5, 0.0)).collect();
        rest_vertices.push(Vec3::new(0.0, -0.5, 0.0));
        let apex = n;
        let faces = (0..n.saturating_sub(1)).map(|j| [j, j + 1, apex]).collect();
        let mut skin_weights: Vec<SkinRow> = (0..n).map(|j| vec![(j, 1.0)]).collect();
        skin_weights.push(vec![(0, 1.0)]);
        BodyTemplate { rest_vertices, faces, joints, skin_weights, shape_dirs: None }
    }

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn identity_pose_gives_identity_transforms() {
        let t = chain(4);
        let jt = joint_transforms(&t, &Pose::identity(4)).unwrap();
        for tr in &jt.0 {
            assert!((tr.rotation - Matrix3::identity()).norm() < 1e-12);
            assert!(tr.translation.norm() < 1e-12);
        }
    }

    #[test]
    fn child_follows_rotated_root() {
        let t = chain(2);
        let mut pose = Pose::identity(2);
        pose.theta[0] = Vec3::new(0.0, 0.0, FRAC_PI_2);
        let jt = joint_transforms(&t, &pose).unwrap();
        // Hand-composed: R_z(90°)·(1,0,0) = (0,1,0).
        assert!(close(&jt.joint_position(&t, 1), &Vec3::new(0.0, 1.0, 0.0), 1e-12));
    }

    #[test]
    fn root_translation_applies_to_every_joint() {
        let t = chain(3);
        let mut pose = Pose::identity(3);
        pose.root_translation = Vec3::new(0.5, -2.0, 3.0);
        for tr in joint_transforms(&t, &pose).unwrap().0 {
            assert!((tr.rotation - Matrix3::identity()).norm() < 1e-12);
            assert!(close(&tr.translation, &pose.root_translation, 1e-12));
        }
    }

    #[test]
    fn pose_length_mismatch() {
        let t = chain(3);
        assert!(matches!(joint_transforms(&t, &Pose::identity(2)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn single_influence_is_rigid() {
        let mut t = chain(2);
        t.rest_vertices[0] = Vec3::new(1.0, 0.0, 0.0);
        let mut pose = Pose::identity(2);
        pose.theta[0] = Vec3::new(0.0, 0.0, FRAC_PI_2);
        let posed = lbs_pose_vertices(&t, &pose).unwrap();
        assert!(close(&posed[0], &Vec3::new(0.0, 1.0, 0.0), 1e-12));
    }

    #[test]
    fn half_weights_blend_linearly() {
        let mut t = chain(2);
        t.skin_weights[0] = vec![(0, 0.5), (1, 0.5)];
        let mut pose = Pose::identity(2);
        // Translate joint 1 by (0,0,2) through the root translation of a
        // one-joint-deep subtree: rotate nothing, shift by root then undo on root.
        pose.root_translation = Vec3::zeros();
        let mut jt = joint_transforms(&t, &pose).unwrap();
        jt.0[1].translation = Vec3::new(0.0, 0.0, 2.0);
        let v = t.rest_vertices[0];
        let blended = jt.blend(&t.skin_weights[0]).apply(&v);
        assert!(close(&blended, &(v + Vec3::new(0.0, 0.0, 1.0)), 1e-12));
    }

    #[test]
    fn shape_blend_applied_before_skinning() {
        let mut t = chain(2);
        let mut dirs = vec![[[0.0; 10]; 3]; t.n_vertices()];
        dirs[0][2][0] = 1.0;
        t.shape_dirs = Some(dirs);
        let mut pose = Pose::identity(2);
        pose.beta[0] = 0.25;
        let posed = lbs_pose_vertices(&t, &pose).unwrap();
        assert!(close(&posed[0], &(t.rest_vertices[0] + Vec3::new(0.0, 0.0, 0.25)), 1e-12));
    }

    fn gaussian_at(p: Vec3) -> GaussianPrimitive {
        GaussianPrimitive::new(p, 0.8, Vec3::repeat(0.1), UnitQuaternion::identity(), Vec3::repeat(0.5))
    }

    #[test]
    fn binding_at_vertex_has_zero_offset() {
        let t = chain(4);
        let pose = Pose::identity(4);
        let posed = lbs_pose_vertices(&t, &pose).unwrap();
        let b = bind_gaussians(&[gaussian_at(posed[3])], &posed, &t, &pose).unwrap();
        assert_eq!(b.vertex, vec![3]);
        assert!(b.canonical_offset[0].norm() < 1e-12);
    }

    #[test]
    fn binding_tie_goes_to_lowest_index() {
        let t = chain(4);
        let pose = Pose::identity(4);
        let posed = lbs_pose_vertices(&t, &pose).unwrap();
        let mid = (posed[2] + posed[3]) / 2.0;
        let b = bind_gaussians(&[gaussian_at(mid)], &posed, &t, &pose).unwrap();
        assert_eq!(b.vertex, vec![2]);
    }

    #[test]
    fn empty_frame_rejected() {
        let t = chain(2);
        let pose = Pose::identity(2);
        let posed = lbs_pose_vertices(&t, &pose).unwrap();
        assert!(matches!(bind_gaussians(&[], &posed, &t, &pose), Err(Error::EmptyFrame)));
    }

    #[test]
    fn repose_to_source_pose_is_identity() {
        let t = chain(3);
        let mut pose = Pose::identity(3);
        pose.theta[1] = Vec3::new(0.2, -0.4, 0.9);
        let posed = lbs_pose_vertices(&t, &pose).unwrap();
        let gs: Vec<_> = posed.iter().map(|p| gaussian_at(p + Vec3::new(0.01, 0.02, 0.03))).collect();
        let b = bind_gaussians(&gs, &posed, &t, &pose).unwrap();
        let out = repose_gaussians(&gs, &b, &t, &pose).unwrap();
        for (a, b) in gs.iter().zip(&out) {
            assert!(close(&a.center, &b.center, 1e-9));
            assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
        }
    }

    #[test]
    fn global_root_rotation_rotates_everything() {
        let t = chain(3);
        let rest = Pose::identity(3);
        let posed = lbs_pose_vertices(&t, &rest).unwrap();
        let gs: Vec<_> = posed.iter().map(|p| gaussian_at(p + Vec3::new(0.0, 0.0, 0.1))).collect();
        let b = bind_gaussians(&gs, &posed, &t, &rest).unwrap();
        let mut dst = rest.clone();
        dst.theta[0] = Vec3::new(0.3, 0.1, -0.7);
        let r0 = Rotation3::new(dst.theta[0]);
        let out = repose_gaussians(&gs, &b, &t, &dst).unwrap();
        let root = t.joints[0].rest;
        for (a, o) in gs.iter().zip(&out) {
            assert!(close(&o.center, &(r0 * (a.center - root) + root), 1e-12));
            let expected = UnitQuaternion::from_rotation_matrix(&r0) * a.rotation;
            assert!(o.rotation.angle_to(&expected) < 1e-9);
        }
    }

    #[test]
    fn blended_rotation_of_rigid_matrix_is_exact() {
        for axis in [Vec3::new(0.1, 2.0, -0.3), Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, -3.1, 0.1)] {
            let r = Rotation3::new(axis);
            let q = blended_rotation(r.matrix());
            assert!(q.angle_to(&UnitQuaternion::from_rotation_matrix(&r)) < 1e-9);
        }
    }
}
