//! Domain types shared by every module, the unconstrained parameter layout
//! used for training, and structural validation of body templates.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Number of shape blend coefficients carried by a [`Pose`].
pub const SHAPE_COEFFS: usize = 10;
/// Maximum number of joint influences per vertex.
pub const MAX_INFLUENCES: usize = 4;
/// Channels of the unconstrained geometry vector accepted by [`pack_gaussian`]:
/// center(3), opacity logit(1), log-scale(3), quaternion(4).
pub const GEOMETRY_CHANNELS: usize = 11;
/// Channels of the full unconstrained parameter vector: the geometry channels
/// followed by three color logits.
pub const RAW_CHANNELS: usize = 14;
/// Feature channels (everything but the center): opacity, scale, rotation, color.
pub const FEATURE_CHANNELS: usize = 11;

/// Offsets into the raw parameter vector.
pub mod raw {
    pub const CENTER: usize = 0;
    pub const OPACITY: usize = 3;
    pub const LOG_SCALE: usize = 4;
    pub const ROTATION: usize = 7;
    pub const COLOR: usize = 11;
}

/// Log-scales are clamped to this magnitude so `exp` can neither overflow nor
/// underflow to zero.
pub const LOG_SCALE_LIMIT: f64 = 30.0;
/// Colors and opacities are clamped this far away from {0, 1} before taking a
/// logit.
pub const LOGIT_EPS: f64 = 1e-9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

/// One 3D Gaussian splat with degree-0 (RGB) color.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vec3,
    pub opacity: f64,
    pub scale: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub color: Vec3,
}

impl GaussianPrimitive {
    pub fn new(
        center: Vec3,
        opacity: f64,
        scale: Vec3,
        rotation: UnitQuaternion<f64>,
        color: Vec3,
    ) -> Self {
        Self { center, opacity, scale, rotation, color }
    }

    /// Checks every field invariant; returns the first violation found.
    pub fn check(&self) -> std::result::Result<(), String> {
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        if !finite(&self.center) {
            return Err("center is not finite".into());
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if !self.scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(format!("scale {:?} not strictly positive", self.scale.as_slice()));
        }
        if (self.rotation.as_ref().norm() - 1.0).abs() > 1e-6 {
            return Err("rotation is not a unit quaternion".into());
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(format!("color {:?} outside [0, 1]", self.color.as_slice()));
        }
        Ok(())
    }

    /// Inverse of [`pack_raw`]: the unconstrained 14-channel vector.
    pub fn to_raw(&self) -> [f64; RAW_CHANNELS] {
        let mut out = [0.0; RAW_CHANNELS];
        out[raw::CENTER..raw::CENTER + 3].copy_from_slice(self.center.as_slice());
        out[raw::OPACITY] = logit(self.opacity);
        for i in 0..3 {
            out[raw::LOG_SCALE + i] = self.scale[i].ln();
            out[raw::COLOR + i] = logit(self.color[i]);
        }
        let q = self.rotation.quaternion();
        out[raw::ROTATION..raw::ROTATION + 4].copy_from_slice(&[q.w, q.i, q.j, q.k]);
        out
    }

    /// The 11 non-center channels of [`Self::to_raw`].
    pub fn features(&self) -> [f64; FEATURE_CHANNELS] {
        let r = self.to_raw();
        let mut f = [0.0; FEATURE_CHANNELS];
        f.copy_from_slice(&r[raw::OPACITY..]);
        f
    }

    /// Rotation as a 3×3 matrix.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }
}

/// Activates the geometry vector `[center(3), opacity logit, log-scale(3),
/// quaternion(4) as (w, x, y, z)]` together with three color logits.
///
/// A zero quaternion maps to the identity rotation.
pub fn pack_gaussian(
    geometry: &[f64; GEOMETRY_CHANNELS],
    color_logit: &[f64; 3],
) -> Result<GaussianPrimitive> {
    if let Some(i) = geometry.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput(format!("geometry channel {i}")));
    }
    if let Some(i) = color_logit.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput(format!("color channel {i}")));
    }
    let g = geometry;
    let center = Vec3::new(g[0], g[1], g[2]);
    let opacity = sigmoid(g[raw::OPACITY]);
    let scale = Vec3::from_fn(|i, _| g[raw::LOG_SCALE + i].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp());
    let q = Quaternion::new(g[7], g[8], g[9], g[10]);
    let norm = q.norm();
    let rotation = if norm > 0.0 && norm.is_finite() {
        UnitQuaternion::new_unchecked(q / norm)
    } else {
        UnitQuaternion::identity()
    };
    let color = Vec3::from_fn(|i, _| sigmoid(color_logit[i]));
    Ok(GaussianPrimitive { center, opacity, scale, rotation, color })
}

/// [`pack_gaussian`] over the full 14-channel layout.
pub fn pack_raw(raw: &[f64; RAW_CHANNELS]) -> Result<GaussianPrimitive> {
    let mut geometry = [0.0; GEOMETRY_CHANNELS];
    geometry.copy_from_slice(&raw[..GEOMETRY_CHANNELS]);
    let mut color = [0.0; 3];
    color.copy_from_slice(&raw[raw::COLOR..]);
    pack_gaussian(&geometry, &color)
}

/// All Gaussians produced for one frame of the input video.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFrame {
    pub timestep: usize,
    pub gaussians: Vec<GaussianPrimitive>,
}

impl GaussianFrame {
    pub fn new(timestep: usize, gaussians: Vec<GaussianPrimitive>) -> Self {
        Self { timestep, gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.gaussians.iter().map(|g| g.center).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub rest: Vec3,
    pub parent: Option<usize>,
}

/// Sparse skin-weight row: `(joint, weight)` pairs.
pub type SkinRow = Vec<(usize, f64)>;

/// Linear blend-shape basis for one vertex: `dirs[axis][coefficient]`.
pub type ShapeDirs = [[f64; SHAPE_COEFFS]; 3];

/// A skinned body template: rest mesh, joint tree and skin weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate {
    pub rest_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub joints: Vec<Joint>,
    pub skin_weights: Vec<SkinRow>,
    pub shape_dirs: Option<Vec<ShapeDirs>>,
}

impl BodyTemplate {
    pub fn n_vertices(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    /// Rest vertices with the shape blend applied (unchanged without a basis).
    pub fn shaped_vertices(&self, beta: &[f64; SHAPE_COEFFS]) -> Vec<Vec3> {
        match &self.shape_dirs {
            None => self.rest_vertices.clone(),
            Some(dirs) => self
                .rest_vertices
                .iter()
                .zip(dirs)
                .map(|(v, d)| {
                    let offset = Vec3::from_fn(|axis, _| {
                        d[axis].iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
                    });
                    v + offset
                })
                .collect(),
        }
    }

    /// Parses the JSON exchange format (see [`TemplateJson`]).
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TemplateJson = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TemplateJson::from(self))?)
    }
}

/// JSON layout of a body template:
/// `{"vertices": [[x,y,z],...], "faces": [[a,b,c],...],
///   "joints": {"rest": [[x,y,z],...], "parents": [null, 0, ...]},
///   "weights": [[[joint, w], ...], ...], "shape_dirs": optional}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TemplateJson {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub joints: JointsJson,
    pub weights: Vec<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_dirs: Option<Vec<ShapeDirs>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JointsJson {
    pub rest: Vec<[f64; 3]>,
    pub parents: Vec<Option<usize>>,
}

impl TryFrom<TemplateJson> for BodyTemplate {
    type Error = Error;

    fn try_from(doc: TemplateJson) -> Result<Self> {
        if doc.joints.rest.len() != doc.joints.parents.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} joint rest positions but {} parents",
                doc.joints.rest.len(),
                doc.joints.parents.len()
            )));
        }
        Ok(BodyTemplate {
            rest_vertices: doc.vertices.iter().map(|v| Vec3::from(*v)).collect(),
            faces: doc.faces,
            joints: doc
                .joints
                .rest
                .iter()
                .zip(doc.joints.parents)
                .map(|(r, parent)| Joint { rest: Vec3::from(*r), parent })
                .collect(),
            skin_weights: doc.weights,
            shape_dirs: doc.shape_dirs,
        })
    }
}

impl From<&BodyTemplate> for TemplateJson {
    fn from(t: &BodyTemplate) -> Self {
        TemplateJson {
            vertices: t.rest_vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: t.faces.clone(),
            joints: JointsJson {
                rest: t.joints.iter().map(|j| [j.rest.x, j.rest.y, j.rest.z]).collect(),
                parents: t.joints.iter().map(|j| j.parent).collect(),
            },
            weights: t.skin_weights.clone(),
            shape_dirs: t.shape_dirs.clone(),
        }
    }
}

/// Per-joint axis-angle rotations, shape coefficients and a root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub theta: Vec<Vec3>,
    pub beta: [f64; SHAPE_COEFFS],
    pub root_translation: Vec3,
}

impl Pose {
    pub fn identity(n_joints: usize) -> Self {
        Self {
            theta: vec![Vec3::zeros(); n_joints],
            beta: [0.0; SHAPE_COEFFS],
            root_translation: Vec3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|t| t.iter().all(|x| x.is_finite()))
            && self.beta.iter().all(|x| x.is_finite())
            && self.root_translation.iter().all(|x| x.is_finite())
    }
}

/// Pinhole camera. `rotation`/`translation` map world to camera coordinates
/// (x right, y down, z forward); pixel `(u, v)` samples image coordinates
/// `(u, v)` exactly, so a point on the optical axis lands on `(cx, cy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` fixes the roll. Principal
    /// point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
            near: 0.01,
        }
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if !(self.near > 0.0) {
            return Err("near plane must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub severity: Severity,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    fn from_issues(issues: Vec<Issue>) -> Self {
        let ok = issues.iter().all(|i| i.severity != Severity::Error);
        Self { ok, issues }
    }

    pub fn errors(&self) -> impl Iterator<Item = &str> {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Error)
            .map(|i| i.message.as_str())
    }

    /// Converts a failed report into an [`Error::InvalidTemplate`].
    pub fn into_result(self) -> Result<()> {
        if self.ok {
            Ok(())
        } else {
            Err(Error::InvalidTemplate(self.errors().collect::<Vec<_>>().join("; ")))
        }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Checks every [`BodyTemplate`] invariant and reports all violations.
pub fn validate_template(template: &BodyTemplate) -> ValidationReport {
    let mut issues = Vec::new();
    let mut error = |message: String| issues.push(Issue { severity: Severity::Error, message });
    let n = template.n_vertices();
    let k = template.n_joints();

    if n == 0 {
        error("template has no vertices".into());
    }
    for (i, v) in template.rest_vertices.iter().enumerate() {
        if !v.iter().all(|x| x.is_finite()) {
            error(format!("vertex {i} is not finite"));
        }
    }

    let mut referenced = vec![false; n];
    for (f, face) in template.faces.iter().enumerate() {
        for &idx in face {
            if idx >= n {
                error(format!("face {f} references vertex {idx} (only {n} vertices)"));
            } else {
                referenced[idx] = true;
            }
        }
    }
    for (i, r) in referenced.iter().enumerate() {
        if !r {
            error(format!("vertex {i} is not referenced by any face"));
        }
    }

    if k == 0 {
        error("template has no joints".into());
    } else {
        if template.joints[0].parent.is_some() {
            error("joint 0 must be the root (no parent)".into());
        }
        let mut parent_ok = true;
        for (j, joint) in template.joints.iter().enumerate().skip(1) {
            match joint.parent {
                None => {
                    error(format!("joint {j} has no parent; only joint 0 may be a root"));
                    parent_ok = false;
                }
                Some(p) if p >= k => {
                    error(format!("joint {j} has parent {p} (only {k} joints)"));
                    parent_ok = false;
                }
                Some(_) => {}
            }
        }
        if parent_ok && joint_order(template).is_none() {
            error("joint tree has cycle".into());
        }
    }

    if template.skin_weights.len() != n {
        error(format!("{} skin-weight rows for {n} vertices", template.skin_weights.len()));
    }
    for (i, row) in template.skin_weights.iter().enumerate() {
        if row.len() > MAX_INFLUENCES {
            error(format!("skin weights row {i} has {} influences (max {MAX_INFLUENCES})", row.len()));
        }
        for &(j, w) in row {
            if j >= k {
                error(format!("skin weights row {i} references joint {j} (only {k} joints)"));
            }
            if !(w >= 0.0) || !w.is_finite() {
                error(format!("skin weights row {i} has invalid weight {w}"));
            }
        }
        let sum: f64 = row.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-6 {
            error(format!("skin weights row {i} sums to {}", round6(sum)));
        }
    }

    if let Some(dirs) = &template.shape_dirs {
        if dirs.len() != n {
            error(format!("{} shape-direction rows for {n} vertices", dirs.len()));
        }
    }

    ValidationReport::from_issues(issues)
}

/// Joints ordered so every parent precedes its children; `None` if the
/// parent links do not form a tree rooted at joint 0.
pub fn joint_order(template: &BodyTemplate) -> Option<Vec<usize>> {
    let k = template.n_joints();
    let mut children = vec![Vec::new(); k];
    for (j, joint) in template.joints.iter().enumerate() {
        match joint.parent {
            Some(p) if p < k && j != 0 => children[p].push(j),
            None if j == 0 => {}
            _ => return None,
        }
    }
    let mut order = Vec::with_capacity(k);
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    // Joints on a cycle are never reached from the root.
    (order.len() == k).then_some(order)
}
