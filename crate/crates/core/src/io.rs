//! On-disk formats: the HGGF tensor container, PLY splat export, PNG images
//! and `key = value` run configs.
//!
//! HGGF layout (little-endian): `"HGGF"`, version `u16`, section count `u32`,
//! then per section: name length `u16`, UTF-8 name, element type `u8`
//! (0 = f32, 1 = f64, 2 = i32), rank `u8`, dims `u64 × rank`, payload byte
//! length `u64`, payload.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};

use crate::error::{Error, Result};
use crate::graph::HumanGaussianGraph;
use crate::graphops::{GraphConfig, GraphParams};
use crate::splat::RenderedImage;
use crate::synthlab::{SceneConfig, SyntheticScene};
use crate::train::FitConfig;
use crate::types::{logit, BodyTemplate, Camera, GaussianFrame, GaussianPrimitive, Joint, Pose, Vec3, SHAPE_COEFFS};

pub const HGGF_MAGIC: &[u8; 4] = b"HGGF";
pub const HGGF_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn element_size(tag: u8) -> Option<usize> {
        match tag {
            0 | 2 => Some(4),
            1 => Some(8),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Hggf {
    pub sections: Vec<Section>,
}

impl Hggf {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: TensorData) -> Result<()> {
        if self.sections.iter().any(|s| s.name == name) {
            return Err(Error::Format(format!("duplicate section {name}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format("section name too long".into()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!("section {name}: shape {shape:?} but {} elements", data.len())));
        }
        self.sections.push(Section { name: name.to_string(), shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        self.push(name, shape, TensorData::F64(data))
    }

    pub fn push_i32(&mut self, name: &str, shape: &[usize], data: Vec<i32>) -> Result<()> {
        self.push(name, shape, TensorData::I32(data))
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("missing section {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let s = self.get(name)?;
        match &s.data {
            TensorData::F64(v) => Ok((&s.shape, v)),
            _ => Err(Error::Format(format!("section {name} is not f64"))),
        }
    }

    pub fn i32s(&self, name: &str) -> Result<(&[usize], &[i32])> {
        let s = self.get(name)?;
        match &s.data {
            TensorData::I32(v) => Ok((&s.shape, v)),
            _ => Err(Error::Format(format!("section {name} is not i32"))),
        }
    }

    /// Single non-negative integer stored as a one-element i32 section.
    pub fn scalar(&self, name: &str) -> Result<usize> {
        let (_, v) = self.i32s(name)?;
        match v {
            [x] if *x >= 0 => Ok(*x as usize),
            _ => Err(Error::Format(format!("section {name} is not a non-negative scalar"))),
        }
    }

    pub fn push_scalar(&mut self, name: &str, value: usize) -> Result<()> {
        let v = i32::try_from(value).map_err(|_| Error::Format(format!("{name} = {value} does not fit in i32")))?;
        self.push_i32(name, &[1], vec![v])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HGGF_MAGIC);
        out.extend_from_slice(&HGGF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.data.tag());
            out.push(s.shape.len() as u8);
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let size = TensorData::element_size(s.data.tag()).expect("known tag");
            out.extend_from_slice(&((s.data.len() * size) as u64).to_le_bytes());
            match &s.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != HGGF_MAGIC {
            return Err(Error::Format("not an HGGF container".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != HGGF_VERSION {
            return Err(Error::Format(format!("unsupported HGGF version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut out = Hggf::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate section {name}")));
            }
            let tag = r.take(1)?[0];
            let size = TensorData::element_size(tag).ok_or_else(|| Error::Format(format!("unknown element type {tag}")))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(u64::from_le_bytes(r.array()?)).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let byte_len = u64::from_le_bytes(r.array()?);
            let elements = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let expected = elements.and_then(|e| e.checked_mul(size));
            if expected.map(|e| e as u64) != Some(byte_len) {
                return Err(Error::Format(format!("section {name}: byte length {byte_len} does not match shape {shape:?}")));
            }
            let payload = r.take(byte_len as usize)?;
            let data = match tag {
                0 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => TensorData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            out.sections.push(Section { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last section".into()));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated container".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

fn to_i32(values: impl IntoIterator<Item = usize>) -> Result<Vec<i32>> {
    values
        .into_iter()
        .map(|v| i32::try_from(v).map_err(|_| Error::Format(format!("index {v} does not fit in i32"))))
        .collect()
}

fn to_usize(values: &[i32]) -> Result<Vec<usize>> {
    values
        .iter()
        .map(|&v| usize::try_from(v).map_err(|_| Error::Format(format!("negative index {v}"))))
        .collect()
}

fn expect_shape(name: &str, shape: &[usize], expected: &[usize]) -> Result<()> {
    if shape != expected {
        return Err(Error::Format(format!("section {name} has shape {shape:?}, expected {expected:?}")));
    }
    Ok(())
}

/// Gaussian attributes in activated form: center, opacity, scale, quaternion
/// (w, x, y, z), color.
pub const ATTRIBUTE_CHANNELS: usize = 14;

fn gaussian_attributes(g: &GaussianPrimitive) -> [f64; ATTRIBUTE_CHANNELS] {
    let q = g.rotation.quaternion();
    [
        g.center.x, g.center.y, g.center.z, g.opacity, g.scale.x, g.scale.y, g.scale.z, q.w, q.i, q.j, q.k,
        g.color.x, g.color.y, g.color.z,
    ]
}

fn gaussian_from_attributes(a: &[f64]) -> Result<GaussianPrimitive> {
    let q = Quaternion::new(a[7], a[8], a[9], a[10]);
    let g = GaussianPrimitive {
        center: Vec3::new(a[0], a[1], a[2]),
        opacity: a[3],
        scale: Vec3::new(a[4], a[5], a[6]),
        rotation: UnitQuaternion::new_unchecked(q),
        color: Vec3::new(a[11], a[12], a[13]),
    };
    g.check().map_err(Error::Format)?;
    Ok(g)
}

fn push_gaussians(out: &mut Hggf, name: &str, gs: &[GaussianPrimitive]) -> Result<()> {
    out.push_f64(name, &[gs.len(), ATTRIBUTE_CHANNELS], gs.iter().flat_map(gaussian_attributes).collect())
}

fn read_gaussians(file: &Hggf, name: &str) -> Result<Vec<GaussianPrimitive>> {
    let (shape, data) = file.f64s(name)?;
    if shape.len() != 2 || shape[1] != ATTRIBUTE_CHANNELS {
        return Err(Error::Format(format!("section {name} has shape {shape:?}")));
    }
    data.chunks_exact(ATTRIBUTE_CHANNELS).map(gaussian_from_attributes).collect()
}

pub fn template_to_hggf(out: &mut Hggf, t: &BodyTemplate) -> Result<()> {
    let n = t.n_vertices();
    let k = t.n_joints();
    out.push_f64("template.vertices", &[n, 3], t.rest_vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect())?;
    out.push_i32("template.faces", &[t.faces.len(), 3], to_i32(t.faces.iter().flatten().copied())?)?;
    out.push_f64("template.joints", &[k, 3], t.joints.iter().flat_map(|j| [j.rest.x, j.rest.y, j.rest.z]).collect())?;
    let parents: Vec<i32> = t.joints.iter().map(|j| j.parent.map_or(-1, |p| p as i32)).collect();
    out.push_i32("template.parents", &[k], parents)?;
    let mut weights = vec![0.0; n * k];
    for (v, row) in t.skin_weights.iter().enumerate() {
        for &(j, w) in row {
            weights[v * k + j] += w;
        }
    }
    out.push_f64("template.weights", &[n, k], weights)?;
    if let Some(dirs) = &t.shape_dirs {
        out.push_f64(
            "template.shape_dirs",
            &[n, 3, SHAPE_COEFFS],
            dirs.iter().flat_map(|d| d.iter().flatten().copied()).collect(),
        )?;
    }
    Ok(())
}

pub fn template_from_hggf(file: &Hggf) -> Result<BodyTemplate> {
    let (vshape, verts) = file.f64s("template.vertices")?;
    if vshape.len() != 2 || vshape[1] != 3 {
        return Err(Error::Format("template.vertices must be N × 3".into()));
    }
    let n = vshape[0];
    let (fshape, faces) = file.i32s("template.faces")?;
    if fshape.len() != 2 || fshape[1] != 3 {
        return Err(Error::Format("template.faces must be F × 3".into()));
    }
    let faces = to_usize(faces)?;
    let (jshape, joints) = file.f64s("template.joints")?;
    let k = jshape.first().copied().unwrap_or(0);
    expect_shape("template.joints", jshape, &[k, 3])?;
    let (pshape, parents) = file.i32s("template.parents")?;
    expect_shape("template.parents", pshape, &[k])?;
    let (wshape, weights) = file.f64s("template.weights")?;
    expect_shape("template.weights", wshape, &[n, k])?;
    let shape_dirs = if file.contains("template.shape_dirs") {
        let (sshape, dirs) = file.f64s("template.shape_dirs")?;
        expect_shape("template.shape_dirs", sshape, &[n, 3, SHAPE_COEFFS])?;
        Some(
            dirs.chunks_exact(3 * SHAPE_COEFFS)
                .map(|c| {
                    let mut d = [[0.0; SHAPE_COEFFS]; 3];
                    for (axis, row) in d.iter_mut().enumerate() {
                        row.copy_from_slice(&c[axis * SHAPE_COEFFS..(axis + 1) * SHAPE_COEFFS]);
                    }
                    d
                })
                .collect(),
        )
    } else {
        None
    };
    let template = BodyTemplate {
        rest_vertices: verts.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        faces: faces.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        joints: joints
            .chunks_exact(3)
            .zip(parents)
            .map(|(c, &p)| Joint { rest: Vec3::new(c[0], c[1], c[2]), parent: usize::try_from(p).ok() })
            .collect(),
        skin_weights: weights
            .chunks_exact(k.max(1))
            .take(n)
            .map(|row| row.iter().enumerate().filter(|(_, &w)| w != 0.0).map(|(j, &w)| (j, w)).collect())
            .collect(),
        shape_dirs,
    };
    crate::types::validate_template(&template).into_result()?;
    Ok(template)
}

pub fn poses_to_hggf(out: &mut Hggf, prefix: &str, poses: &[Pose]) -> Result<()> {
    let k = poses.first().map_or(0, |p| p.theta.len());
    if poses.iter().any(|p| p.theta.len() != k) {
        return Err(Error::DimensionMismatch("poses with different joint counts".into()));
    }
    out.push_f64(&format!("{prefix}.theta"), &[poses.len(), k, 3], poses.iter().flat_map(|p| p.theta.iter().flat_map(|t| [t.x, t.y, t.z])).collect())?;
    out.push_f64(&format!("{prefix}.beta"), &[poses.len(), SHAPE_COEFFS], poses.iter().flat_map(|p| p.beta).collect())?;
    out.push_f64(
        &format!("{prefix}.translation"),
        &[poses.len(), 3],
        poses.iter().flat_map(|p| [p.root_translation.x, p.root_translation.y, p.root_translation.z]).collect(),
    )
}

pub fn poses_from_hggf(file: &Hggf, prefix: &str) -> Result<Vec<Pose>> {
    let (tshape, theta) = file.f64s(&format!("{prefix}.theta"))?;
    if tshape.len() != 3 || tshape[2] != 3 {
        return Err(Error::Format(format!("{prefix}.theta must be T × K × 3")));
    }
    let (count, k) = (tshape[0], tshape[1]);
    let (bshape, beta) = file.f64s(&format!("{prefix}.beta"))?;
    expect_shape(&format!("{prefix}.beta"), bshape, &[count, SHAPE_COEFFS])?;
    let (rshape, trans) = file.f64s(&format!("{prefix}.translation"))?;
    expect_shape(&format!("{prefix}.translation"), rshape, &[count, 3])?;
    let poses: Vec<Pose> = (0..count)
        .map(|t| {
            let mut b = [0.0; SHAPE_COEFFS];
            b.copy_from_slice(&beta[t * SHAPE_COEFFS..(t + 1) * SHAPE_COEFFS]);
            Pose {
                theta: (0..k).map(|j| Vec3::from_column_slice(&theta[(t * k + j) * 3..(t * k + j + 1) * 3])).collect(),
                beta: b,
                root_translation: Vec3::from_column_slice(&trans[t * 3..t * 3 + 3]),
            }
        })
        .collect();
    if poses.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteInput(format!("{prefix} pose values")));
    }
    Ok(poses)
}

/// Full scene: template, poses, frames, cameras, ground-truth images and the
/// clean avatar.
pub fn scene_to_hggf(scene: &SyntheticScene) -> Result<Hggf> {
    let mut out = Hggf::new();
    template_to_hggf(&mut out, &scene.template)?;
    poses_to_hggf(&mut out, "poses", &scene.poses)?;
    out.push_i32("frames.timestep", &[scene.frames.len()], to_i32(scene.frames.iter().map(|f| f.timestep))?)?;
    out.push_i32("frames.count", &[scene.frames.len()], to_i32(scene.frames.iter().map(|f| f.len()))?)?;
    let all: Vec<GaussianPrimitive> = scene.frames.iter().flat_map(|f| f.gaussians.iter().cloned()).collect();
    push_gaussians(&mut out, "frames.gaussians", &all)?;
    push_gaussians(&mut out, "truth", &scene.truth)?;
    let c = scene.cameras.len();
    out.push_f64("cameras.intrinsics", &[c, 5], scene.cameras.iter().flat_map(|k| [k.fx, k.fy, k.cx, k.cy, k.near]).collect())?;
    out.push_f64("cameras.rotation", &[c, 3, 3], scene.cameras.iter().flat_map(|k| k.rotation.transpose().as_slice().to_vec()).collect())?;
    out.push_f64("cameras.translation", &[c, 3], scene.cameras.iter().flat_map(|k| k.translation.as_slice().to_vec()).collect())?;
    out.push_i32("cameras.size", &[c, 2], to_i32(scene.cameras.iter().flat_map(|k| [k.width, k.height]))?)?;
    let (w, h) = (scene.cameras[0].width, scene.cameras[0].height);
    if scene.cameras.iter().any(|k| k.width != w || k.height != h) {
        return Err(Error::DimensionMismatch("all cameras must share one image size".into()));
    }
    let t = scene.gt_images.len();
    out.push_f64("gt.rgb", &[t, c, h, w, 3], scene.gt_images.iter().flatten().flat_map(|i| i.rgb.iter().copied()).collect())?;
    out.push_f64("gt.alpha", &[t, c, h, w], scene.gt_images.iter().flatten().flat_map(|i| i.alpha.iter().copied()).collect())?;
    out.push_scalar("meta.reference_frame", scene.reference_frame)?;
    out.push_scalar("meta.heldout_camera", scene.heldout_camera)?;
    out.push_i32("meta.seed", &[2], vec![scene.seed as u32 as i32, (scene.seed >> 32) as u32 as i32])?;
    Ok(out)
}

pub fn scene_from_hggf(file: &Hggf) -> Result<SyntheticScene> {
    let template = template_from_hggf(file)?;
    let poses = poses_from_hggf(file, "poses")?;
    let (_, timesteps) = file.i32s("frames.timestep")?;
    let (_, counts) = file.i32s("frames.count")?;
    let counts = to_usize(counts)?;
    let all = read_gaussians(file, "frames.gaussians")?;
    if counts.len() != poses.len() || timesteps.len() != poses.len() || counts.iter().sum::<usize>() != all.len() {
        return Err(Error::Format("frame table inconsistent with poses or gaussians".into()));
    }
    let mut frames = Vec::with_capacity(counts.len());
    let mut offset = 0;
    for (&n, &ts) in counts.iter().zip(timesteps) {
        frames.push(GaussianFrame::new(ts.max(0) as usize, all[offset..offset + n].to_vec()));
        offset += n;
    }
    let truth = read_gaussians(file, "truth")?;
    let (ishape, intr) = file.f64s("cameras.intrinsics")?;
    let c = ishape.first().copied().unwrap_or(0);
    expect_shape("cameras.intrinsics", ishape, &[c, 5])?;
    let (rshape, rot) = file.f64s("cameras.rotation")?;
    expect_shape("cameras.rotation", rshape, &[c, 3, 3])?;
    let (tshape, trans) = file.f64s("cameras.translation")?;
    expect_shape("cameras.translation", tshape, &[c, 3])?;
    let (sshape, size) = file.i32s("cameras.size")?;
    expect_shape("cameras.size", sshape, &[c, 2])?;
    let size = to_usize(size)?;
    let cameras: Vec<Camera> = (0..c)
        .map(|i| Camera {
            fx: intr[i * 5],
            fy: intr[i * 5 + 1],
            cx: intr[i * 5 + 2],
            cy: intr[i * 5 + 3],
            near: intr[i * 5 + 4],
            rotation: Matrix3::from_row_slice(&rot[i * 9..i * 9 + 9]),
            translation: Vec3::from_column_slice(&trans[i * 3..i * 3 + 3]),
            width: size[i * 2],
            height: size[i * 2 + 1],
        })
        .collect();
    for cam in &cameras {
        cam.check().map_err(Error::Format)?;
    }
    let t = poses.len();
    let (w, h) = cameras.first().map_or((0, 0), |k| (k.width, k.height));
    let (gshape, rgb) = file.f64s("gt.rgb")?;
    expect_shape("gt.rgb", gshape, &[t, c, h, w, 3])?;
    let (ashape, alpha) = file.f64s("gt.alpha")?;
    expect_shape("gt.alpha", ashape, &[t, c, h, w])?;
    let px = w * h;
    let gt_images = (0..t)
        .map(|ti| {
            (0..c)
                .map(|ci| {
                    let k = ti * c + ci;
                    RenderedImage {
                        width: w,
                        height: h,
                        rgb: rgb[k * px * 3..(k + 1) * px * 3].to_vec(),
                        alpha: alpha[k * px..(k + 1) * px].to_vec(),
                    }
                })
                .collect()
        })
        .collect();
    let reference_frame = file.scalar("meta.reference_frame")?;
    let heldout_camera = file.scalar("meta.heldout_camera")?;
    if reference_frame >= t.max(1) || (c > 0 && heldout_camera >= c) {
        return Err(Error::Format("reference frame or held-out camera out of range".into()));
    }
    let (_, seed) = file.i32s("meta.seed")?;
    let seed = match seed {
        [lo, hi] => (*lo as u32 as u64) | ((*hi as u32 as u64) << 32),
        _ => return Err(Error::Format("meta.seed must hold two words".into())),
    };
    Ok(SyntheticScene { template, poses, frames, cameras, gt_images, truth, reference_frame, heldout_camera, seed })
}

/// Graph edges and metadata. The frames, poses and template live in the
/// scene file the graph was built from.
pub fn graph_to_hggf(graph: &HumanGaussianGraph) -> Result<Hggf> {
    let mut out = Hggf::new();
    out.push_i32("graph.frame_count", &[graph.n_frames()], to_i32(graph.evg.iter().map(|e| e.len()))?)?;
    out.push_i32("graph.evg", &[graph.n_gaussians()], to_i32(graph.evg.iter().flatten().copied())?)?;
    let mut offsets = vec![0usize];
    for l in &graph.evv {
        offsets.push(offsets.last().unwrap() + l.len());
    }
    out.push_i32("graph.evv_offsets", &[offsets.len()], to_i32(offsets)?)?;
    let flat: Vec<usize> = graph.evv.iter().flatten().copied().collect();
    out.push_i32("graph.evv", &[flat.len()], to_i32(flat)?)?;
    out.push_scalar("meta.d0", graph.d0)?;
    out.push_scalar("meta.n_vertices", graph.n_vertices())?;
    out.push_scalar("meta.partition_count", graph.partition_count())?;
    Ok(out)
}

/// Edge tables of a stored graph: `(evg, evv, d0)`.
pub fn graph_edges_from_hggf(file: &Hggf) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>, usize)> {
    let counts = to_usize(file.i32s("graph.frame_count")?.1)?;
    let evg_flat = to_usize(file.i32s("graph.evg")?.1)?;
    let offsets = to_usize(file.i32s("graph.evv_offsets")?.1)?;
    let evv_flat = to_usize(file.i32s("graph.evv")?.1)?;
    if counts.iter().sum::<usize>() != evg_flat.len()
        || offsets.last() != Some(&evv_flat.len())
        || offsets.windows(2).any(|w| w[0] > w[1])
    {
        return Err(Error::Format("inconsistent graph tables".into()));
    }
    let mut evg = Vec::new();
    let mut start = 0;
    for n in counts {
        evg.push(evg_flat[start..start + n].to_vec());
        start += n;
    }
    let evv = offsets.windows(2).map(|w| evv_flat[w[0]..w[1]].to_vec()).collect();
    Ok((evg, evv, file.scalar("meta.d0")?))
}

pub fn params_to_hggf(params: &GraphParams) -> Result<Hggf> {
    let mut out = Hggf::new();
    let c = &params.config;
    out.push_i32(
        "config",
        &[5],
        to_i32([c.dim, c.layers, c.heads, c.share_kv as usize, params.n_vertices()])?,
    )?;
    for (name, shape, data) in params.named_tensors() {
        out.push_f64(&format!("param.{name}"), &shape, data.to_vec())?;
    }
    Ok(out)
}

pub fn params_from_hggf(file: &Hggf) -> Result<GraphParams> {
    let (_, c) = file.i32s("config")?;
    let c = to_usize(c)?;
    if c.len() != 5 {
        return Err(Error::Format("config section must hold five values".into()));
    }
    let config = GraphConfig { dim: c[0], layers: c[1], heads: c[2], share_kv: c[3] != 0 };
    let tensors: Vec<(String, Vec<usize>, Vec<f64>)> = file
        .sections
        .iter()
        .filter_map(|s| {
            let name = s.name.strip_prefix("param.")?;
            match &s.data {
                TensorData::F64(v) => Some((name.to_string(), s.shape.clone(), v.clone())),
                _ => None,
            }
        })
        .collect();
    GraphParams::from_named(&config, c[4], &tensors)
}

/// Spherical-harmonic band-0 constant used by splat viewers for `f_dc`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const PLY_FIELDS: [&str; 14] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1",
    "f_dc_2",
];

/// Binary little-endian PLY in the layout common splat viewers read:
/// opacity as a logit, log scales, quaternion `(w, x, y, z)` and
/// `f_dc = (color − 0.5) / SH_C0`.
pub fn export_ply(gaussians: &[GaussianPrimitive], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", gaussians.len())?;
    for f in PLY_FIELDS {
        writeln!(w, "property float {f}")?;
    }
    w.write_all(b"end_header\n")?;
    for g in gaussians {
        let q = g.rotation.quaternion();
        let values = [
            g.center.x,
            g.center.y,
            g.center.z,
            logit(g.opacity),
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
            (g.color.x - 0.5) / SH_C0,
            (g.color.y - 0.5) / SH_C0,
            (g.color.z - 0.5) / SH_C0,
        ];
        for v in values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`export_ply`] (fields in exactly that order).
pub fn load_ply(path: &Path) -> Result<Vec<GaussianPrimitive>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    let mut count = None;
    let mut fields = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("PLY header not terminated".into()));
        }
        let t = line.trim_end();
        if first {
            if t != "ply" {
                return Err(Error::Format("not a PLY file".into()));
            }
            first = false;
            continue;
        }
        if t == "end_header" {
            break;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", ..] => return Err(Error::Format("only binary little-endian PLY is supported".into())),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::Format("bad vertex count".into()))?)
            }
            ["property", "float", name] => fields.push(name.to_string()),
            ["comment", ..] => {}
            _ => return Err(Error::Format(format!("unsupported PLY header line: {t}"))),
        }
    }
    if fields != PLY_FIELDS {
        return Err(Error::Format("unexpected PLY property layout".into()));
    }
    let count = count.ok_or_else(|| Error::Format("missing vertex element".into()))?;
    let mut buf = vec![0u8; count * PLY_FIELDS.len() * 4];
    r.read_exact(&mut buf).map_err(|_| Error::Format("truncated PLY body".into()))?;
    buf.chunks_exact(PLY_FIELDS.len() * 4)
        .map(|rec| {
            let v: Vec<f64> = rec.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let q = Quaternion::new(v[7], v[8], v[9], v[10]);
            let g = GaussianPrimitive {
                center: Vec3::new(v[0], v[1], v[2]),
                opacity: crate::types::sigmoid(v[3]),
                scale: Vec3::new(v[4].exp(), v[5].exp(), v[6].exp()),
                rotation: UnitQuaternion::new_normalize(q),
                color: (Vec3::new(v[11], v[12], v[13]) * SH_C0 + Vec3::repeat(0.5)).map(|c| c.clamp(0.0, 1.0)),
            };
            g.check().map_err(Error::Format)?;
            Ok(g)
        })
        .collect()
}

/// 8-bit RGB PNG of an image (already composited over black).
pub fn save_png(image: &RenderedImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, image.width as u32, image.height as u32, image::ColorType::Rgb8)?;
    Ok(())
}

/// Everything a pipeline run needs, read from a `key = value` file.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub scene: SceneConfig,
    pub subdivisions: usize,
    pub joints: usize,
    pub scene_path: Option<String>,
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            scene: SceneConfig::default(),
            subdivisions: 2,
            joints: 5,
            scene_path: None,
            output: None,
        }
    }
}

pub const RUN_CONFIG_KEYS: &[&str] = &[
    "learning_rate", "grad_clip", "steps", "frames_per_step", "seed", "layers", "dim", "heads", "share_kv", "d0",
    "eval_every", "alpha1", "alpha2", "frames", "gaussians", "cameras", "camera_arc", "image_size", "subdivisions", "joints",
    "jitter", "splat_scale", "contrast", "color_noise", "scene", "output",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

impl RunConfig {
    /// Sets one key; `seed` drives both the scene and the fit.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "learning_rate" => self.fit.learning_rate = parse_value(key, v)?,
            "grad_clip" => self.fit.grad_clip = parse_value(key, v)?,
            "steps" => self.fit.steps = parse_value(key, v)?,
            "frames_per_step" => self.fit.frames_per_step = parse_value(key, v)?,
            "seed" => {
                self.fit.seed = parse_value(key, v)?;
                self.scene.seed = self.fit.seed;
            }
            "layers" => self.fit.layers = parse_value(key, v)?,
            "dim" => self.fit.dim = parse_value(key, v)?,
            "heads" => self.fit.heads = parse_value(key, v)?,
            "share_kv" => self.fit.share_kv = parse_value(key, v)?,
            "d0" => self.fit.d0 = parse_value(key, v)?,
            "eval_every" => self.fit.eval_every = parse_value(key, v)?,
            "alpha1" => self.fit.loss.alpha1 = parse_value(key, v)?,
            "alpha2" => self.fit.loss.alpha2 = parse_value(key, v)?,
            "frames" => self.scene.frames = parse_value(key, v)?,
            "gaussians" => self.scene.gaussians = parse_value(key, v)?,
            "cameras" => self.scene.cameras = parse_value(key, v)?,
            "camera_arc" => self.scene.camera_arc = parse_value(key, v)?,
            "image_size" => self.scene.image_size = parse_value(key, v)?,
            "subdivisions" => self.subdivisions = parse_value(key, v)?,
            "joints" => self.joints = parse_value(key, v)?,
            "jitter" => self.scene.jitter = parse_value(key, v)?,
            "splat_scale" => self.scene.splat_scale = parse_value(key, v)?,
            "contrast" => self.scene.contrast = parse_value(key, v)?,
            "color_noise" => self.scene.color_noise = parse_value(key, v)?,
            "scene" => self.scene_path = Some(v.to_string()),
            "output" => self.output = Some(v.to_string()),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.check()?;
        let s = &self.scene;
        if s.frames == 0 || s.gaussians == 0 || s.cameras == 0 || s.image_size == 0 {
            return Err(Error::Config("frames, gaussians, cameras and image size must be positive".into()));
        }
        if self.subdivisions > 4 || self.joints == 0 {
            return Err(Error::Config("subdivisions must be in [0, 4] and joints positive".into()));
        }
        if !(s.contrast > 0.0 && s.contrast <= 1.0) || !(s.jitter >= 0.0) || !(s.splat_scale > 0.0) || !(s.color_noise >= 0.0) {
            return Err(Error::Config("scene noise parameters out of range".into()));
        }
        Ok(())
    }
}
