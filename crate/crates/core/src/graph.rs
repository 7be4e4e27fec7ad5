//! Human Gaussian Graph construction.
//!
//! First-layer nodes are the Gaussians of every frame, second-layer nodes are
//! template vertices. Each Gaussian gets one edge to its nearest vertex of the
//! template posed into that frame (`evg`); vertices are linked to every vertex
//! within `d0` face hops (`evv`).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::skinning::lbs_pose_vertices;
use crate::spatial::KdTree;
use crate::types::{BodyTemplate, GaussianFrame, Pose, Vec3};

pub const DEFAULT_D0: usize = 2;

/// Identifies one Gaussian: `(frame position, index within frame)`, both
/// zero-based.
pub type GaussianId = (usize, usize);

#[derive(Clone, Debug)]
pub struct HumanGaussianGraph {
    pub frames: Vec<GaussianFrame>,
    pub poses: Vec<Pose>,
    pub template: BodyTemplate,
    /// `evg[t][m]` is the vertex Gaussian `m` of frame `t` is attached to.
    pub evg: Vec<Vec<usize>>,
    /// Sorted neighbor list of every vertex, itself included.
    pub evv: Vec<Vec<usize>>,
    pub d0: usize,
    /// Inverse of `evg`: the Gaussians attached to each vertex, in `(t, m)`
    /// order.
    pub groups: Vec<Vec<GaussianId>>,
}

impl HumanGaussianGraph {
    pub fn n_vertices(&self) -> usize {
        self.template.n_vertices()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Total number of first-layer nodes, `M·T`.
    pub fn n_gaussians(&self) -> usize {
        self.frames.iter().map(|f| f.len()).sum()
    }

    /// Row offset of frame `t` in a flattened `(t, m)` ordering of all
    /// Gaussians.
    pub fn frame_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.frames.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for f in &self.frames {
            acc += f.len();
            offsets.push(acc);
        }
        offsets
    }

    /// `Σ_n |B_n(𝒢)|`.
    pub fn partition_count(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }
}

/// Nearest posed vertex for every center, ties to the lowest index.
pub fn nearest_vertex_assign(centers: &[Vec3], posed_vertices: &[Vec3]) -> Result<Vec<usize>> {
    if posed_vertices.is_empty() {
        return Err(Error::EmptyVertexSet);
    }
    let tree = KdTree::build(posed_vertices);
    Ok(centers
        .par_iter()
        .map(|c| tree.nearest(c).expect("non-empty tree"))
        .collect())
}

/// Compressed share-a-face vertex adjacency (without self loops).
fn face_adjacency(faces: &[[usize; 3]], n_vertices: usize) -> (Vec<usize>, Vec<usize>) {
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(faces.len() * 6);
    for f in faces {
        for a in 0..3 {
            for b in 0..3 {
                if f[a] != f[b] {
                    pairs.push((f[a], f[b]));
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut offsets = vec![0usize; n_vertices + 1];
    for &(a, _) in &pairs {
        offsets[a + 1] += 1;
    }
    for i in 0..n_vertices {
        offsets[i + 1] += offsets[i];
    }
    (offsets, pairs.into_iter().map(|(_, b)| b).collect())
}

/// Vertices within `d0` hops on the share-a-face adjacency graph, self
/// included, sorted ascending.
pub fn face_hop_neighbors(faces: &[[usize; 3]], n_vertices: usize, d0: usize) -> Vec<Vec<usize>> {
    let (offsets, adjacent) = face_adjacency(faces, n_vertices);
    (0..n_vertices)
        .into_par_iter()
        .map_init(
            || (vec![usize::MAX; n_vertices], Vec::new()),
            |(stamp, frontier), start| {
                // Level-synchronous expansion; `stamp[v] == start` marks v as seen.
                stamp[start] = start;
                frontier.clear();
                frontier.push(start);
                let mut reached = vec![start];
                for _ in 0..d0 {
                    let mut next = Vec::new();
                    for &v in frontier.iter() {
                        for &u in &adjacent[offsets[v]..offsets[v + 1]] {
                            if stamp[u] != start {
                                stamp[u] = start;
                                next.push(u);
                            }
                        }
                    }
                    if next.is_empty() {
                        break;
                    }
                    reached.extend_from_slice(&next);
                    *frontier = next;
                }
                reached.sort_unstable();
                reached
            },
        )
        .collect()
}

/// Builds the full graph. `poses[t]` must be the pose of `frames[t]`.
pub fn build_graph(
    frames: Vec<GaussianFrame>,
    poses: Vec<Pose>,
    template: BodyTemplate,
    d0: usize,
) -> Result<HumanGaussianGraph> {
    if frames.is_empty() {
        return Err(Error::DimensionMismatch("graph needs at least one frame".into()));
    }
    if frames.len() != poses.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} frames but {} poses",
            frames.len(),
            poses.len()
        )));
    }
    if template.n_vertices() == 0 {
        return Err(Error::EmptyVertexSet);
    }
    let evg = frames
        .par_iter()
        .zip(poses.par_iter())
        .map(|(frame, pose)| {
            let posed = lbs_pose_vertices(&template, pose)?;
            nearest_vertex_assign(&frame.centers(), &posed)
        })
        .collect::<Result<Vec<_>>>()?;
    let evv = face_hop_neighbors(&template.faces, template.n_vertices(), d0);
    let mut groups = vec![Vec::new(); template.n_vertices()];
    for (t, assignment) in evg.iter().enumerate() {
        for (m, &n) in assignment.iter().enumerate() {
            groups[n].push((t, m));
        }
    }
    Ok(HumanGaussianGraph { frames, poses, template, evg, evv, d0, groups })
}
