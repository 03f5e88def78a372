//! Rigged parametric hand: template mesh, skeleton, linear blend skinning
//! forward kinematics, rotation-6D conversions and pose flattening.
//!
//! The skeleton is a fixed tree of 16 joints (root + 15 articulated) so a
//! single hand pose always flattens to 99 values: translation (3), root
//! orientation in rotation 6D (6) and 15 joint rotations in 6D (90).
//! Analytic gradients of the kinematic chain are provided for training.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;

/// Number of skeleton joints (root + 15).
pub const JOINT_COUNT: usize = 16;
/// Number of articulated (non-root) joints carrying a 6D rotation.
pub const ARTICULATED_JOINTS: usize = 15;
/// Flattened single-hand pose dimension: 3 + 6 + 15 * 6.
pub const POSE_DIM: usize = 99;
/// Flattened bimanual pose dimension.
pub const BIMANUAL_DIM: usize = 2 * POSE_DIM;

const DEGENERATE_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Rotation 6D
// ---------------------------------------------------------------------------

/// Converts a 6D rotation representation (first two matrix columns) into a
/// proper rotation via Gram-Schmidt. Never fails: degenerate inputs fall back
/// to canonical axes so that noisy diffusion samples always decode.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Matrix3<f64> {
    rot6d_forward(r).rotation
}

/// Returns the first two columns of `m` concatenated.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> [f64; 6] {
    [
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]
}

/// Intermediate values of the Gram-Schmidt pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Rot6dCache {
    pub rotation: Matrix3<f64>,
    a_norm: f64,
    c1: Vector3<f64>,
    proj_src: Vector3<f64>,
    t_norm: f64,
    c2: Vector3<f64>,
    a_degenerate: bool,
    b_degenerate: bool,
}

pub fn rot6d_forward(r: &[f64; 6]) -> Rot6dCache {
    let a = Vector3::new(r[0], r[1], r[2]);
    let b = Vector3::new(r[3], r[4], r[5]);

    let a_norm = a.norm();
    let (c1, a_degenerate) = if a_norm < DEGENERATE_EPS {
        (Vector3::x(), true)
    } else {
        (a / a_norm, false)
    };

    let t = b - c1 * c1.dot(&b);
    let (proj_src, t, b_degenerate) = if t.norm() < DEGENERATE_EPS {
        // Second column collapsed onto the first: orthogonalize the canonical
        // axis least aligned with c1 instead.
        let e = least_aligned_axis(&c1);
        (e, e - c1 * c1.dot(&e), true)
    } else {
        (b, t, false)
    };
    let t_norm = t.norm();
    let c2 = t / t_norm;
    let c3 = c1.cross(&c2);

    Rot6dCache {
        rotation: Matrix3::from_columns(&[c1, c2, c3]),
        a_norm,
        c1,
        proj_src,
        t_norm,
        c2,
        a_degenerate,
        b_degenerate,
    }
}

/// Backpropagates a gradient w.r.t. the rotation matrix to the 6D input.
/// Fallback branches contribute zero gradient to the collapsed half.
pub fn rot6d_backward(cache: &Rot6dCache, d_rot: &Matrix3<f64>) -> [f64; 6] {
    let mut dc1 = d_rot.column(0).into_owned();
    let mut dc2 = d_rot.column(1).into_owned();
    let dc3 = d_rot.column(2).into_owned();

    // c3 = c1 x c2
    dc1 += cache.c2.cross(&dc3);
    dc2 += dc3.cross(&cache.c1);

    // c2 = t / |t|
    let dt = (dc2 - cache.c2 * cache.c2.dot(&dc2)) / cache.t_norm;

    // t = s - (c1 . s) c1 with s the projection source
    let s = cache.proj_src;
    let db_half = if cache.b_degenerate {
        Vector3::zeros()
    } else {
        dt - cache.c1 * cache.c1.dot(&dt)
    };
    dc1 += -dt * cache.c1.dot(&s) - s * cache.c1.dot(&dt);

    // c1 = a / |a|
    let da = if cache.a_degenerate {
        Vector3::zeros()
    } else {
        (dc1 - cache.c1 * cache.c1.dot(&dc1)) / cache.a_norm
    };

    [da.x, da.y, da.z, db_half.x, db_half.y, db_half.z]
}

fn least_aligned_axis(c1: &Vector3<f64>) -> Vector3<f64> {
    let abs = [c1.x.abs(), c1.y.abs(), c1.z.abs()];
    let mut best = 0;
    for k in 1..3 {
        if abs[k] < abs[best] {
            best = k;
        }
    }
    match best {
        0 => Vector3::x(),
        1 => Vector3::y(),
        _ => Vector3::z(),
    }
}

// ---------------------------------------------------------------------------
// Pose types
// ---------------------------------------------------------------------------

/// Per-frame parameters of one hand: translation, root orientation and the
/// 15 articulated joint rotations, all rotations in 6D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub trans: Vector3<f64>,
    pub root_rot: [f64; 6],
    pub joint_rots: [[f64; 6]; ARTICULATED_JOINTS],
}

impl HandPose {
    /// Identity orientation, zero translation.
    pub fn identity() -> Self {
        HandPose {
            trans: Vector3::zeros(),
            root_rot: IDENTITY_6D,
            joint_rots: [IDENTITY_6D; ARTICULATED_JOINTS],
        }
    }

    /// All 99 entries zero (the padding pose; decodes via the 6D fallbacks).
    pub fn zeros() -> Self {
        HandPose {
            trans: Vector3::zeros(),
            root_rot: [0.0; 6],
            joint_rots: [[0.0; 6]; ARTICULATED_JOINTS],
        }
    }

    pub fn flatten_into(&self, out: &mut [f64]) {
        assert_eq!(out.len(), POSE_DIM);
        out[0..3].copy_from_slice(self.trans.as_slice());
        out[3..9].copy_from_slice(&self.root_rot);
        for (j, r) in self.joint_rots.iter().enumerate() {
            out[9 + 6 * j..15 + 6 * j].copy_from_slice(r);
        }
    }

    pub fn flatten(&self) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        self.flatten_into(&mut out);
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != POSE_DIM {
            return Err(Error::PoseLength {
                expected: POSE_DIM,
                got: v.len(),
            });
        }
        let mut joint_rots = [[0.0; 6]; ARTICULATED_JOINTS];
        for (j, r) in joint_rots.iter_mut().enumerate() {
            r.copy_from_slice(&v[9 + 6 * j..15 + 6 * j]);
        }
        let mut root_rot = [0.0; 6];
        root_rot.copy_from_slice(&v[3..9]);
        Ok(HandPose {
            trans: Vector3::new(v[0], v[1], v[2]),
            root_rot,
            joint_rots,
        })
    }

    /// Left-composes a rigid transform: the hand as a whole is rotated by `q`
    /// and shifted by `t` (root becomes `q * R_root`, translation `q * T + t`).
    pub fn apply_global(&self, q: &Matrix3<f64>, t: &Vector3<f64>) -> HandPose {
        let root = rot6d_to_matrix(&self.root_rot);
        HandPose {
            trans: q * self.trans + t,
            root_rot: matrix_to_rot6d(&(q * root)),
            joint_rots: self.joint_rots,
        }
    }
}

pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Which hand a pose channel refers to. Channel order everywhere is
/// left (0) then right (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

/// Pose of both hands plus presence flags; absent hands carry zero poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimanualPose {
    pub left: HandPose,
    pub right: HandPose,
    pub left_present: bool,
    pub right_present: bool,
}

impl BimanualPose {
    pub fn flatten(&self) -> [f64; BIMANUAL_DIM] {
        let mut out = [0.0; BIMANUAL_DIM];
        self.left.flatten_into(&mut out[..POSE_DIM]);
        self.right.flatten_into(&mut out[POSE_DIM..]);
        out
    }

    /// Inverse of [`BimanualPose::flatten`]. Presence flags are not part of
    /// the vector; both are restored as present.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != BIMANUAL_DIM {
            return Err(Error::PoseLength {
                expected: BIMANUAL_DIM,
                got: v.len(),
            });
        }
        Ok(BimanualPose {
            left: HandPose::from_slice(&v[..POSE_DIM])?,
            right: HandPose::from_slice(&v[POSE_DIM..])?,
            left_present: true,
            right_present: true,
        })
    }

    pub fn hand(&self, side: Side) -> &HandPose {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn present(&self, side: Side) -> bool {
        match side {
            Side::Left => self.left_present,
            Side::Right => self.right_present,
        }
    }
}

// ---------------------------------------------------------------------------
// Rig
// ---------------------------------------------------------------------------

/// Rigged template hand: mesh, skeleton and skinning weights.
#[derive(Debug, Clone)]
pub struct HandRig {
    pub template_vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub parent_index: Vec<usize>,
    pub joint_rest_positions: Vec<Vector3<f64>>,
    pub skin_weights: Array2<f64>,
    /// Per vertex, the nonzero (joint, weight) pairs, for fast skinning.
    sparse_weights: Vec<Vec<(usize, f64)>>,
}

impl HandRig {
    pub fn new(
        template_vertices: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        parent_index: Vec<usize>,
        joint_rest_positions: Vec<Vector3<f64>>,
        skin_weights: Array2<f64>,
    ) -> Result<Self> {
        let mut rig = HandRig {
            template_vertices,
            faces,
            parent_index,
            joint_rest_positions,
            skin_weights,
            sparse_weights: Vec::new(),
        };
        rig.validate()?;
        rig.rebuild_sparse_weights();
        Ok(rig)
    }

    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    fn validate(&self) -> Result<()> {
        let v = self.template_vertices.len();
        let j = self.joint_rest_positions.len();
        if j != JOINT_COUNT {
            return Err(Error::InvalidRig(format!(
                "expected {JOINT_COUNT} joints, got {j}"
            )));
        }
        if self.parent_index.len() != j {
            return Err(Error::InvalidRig("parent_index length mismatch".into()));
        }
        // Tree rooted at joint 0: parents come strictly before children.
        if self.parent_index[0] != 0 {
            return Err(Error::InvalidRig("joint 0 must be its own parent".into()));
        }
        for (idx, &p) in self.parent_index.iter().enumerate().skip(1) {
            if p >= idx {
                return Err(Error::InvalidRig(format!(
                    "joint {idx} has parent {p}; parents must precede children"
                )));
            }
        }
        if self.skin_weights.shape() != [v, j] {
            return Err(Error::InvalidRig(format!(
                "skin_weights shape {:?}, expected [{v}, {j}]",
                self.skin_weights.shape()
            )));
        }
        for (i, row) in self.skin_weights.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &w in row {
                if w < 0.0 {
                    return Err(Error::InvalidRig(format!(
                        "negative skin weight at vertex {i}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidRig(format!(
                    "skin weights of vertex {i} sum to {sum}, expected 1"
                )));
            }
        }
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i >= v) {
                return Err(Error::InvalidRig(format!(
                    "face {f} references a vertex out of range"
                )));
            }
        }
        Ok(())
    }

    fn rebuild_sparse_weights(&mut self) {
        self.sparse_weights = self
            .skin_weights
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(j, &w)| (j, w))
                    .collect()
            })
            .collect();
    }

    /// Mirrors the rig across the x = 0 plane (left <-> right hand). Face
    /// winding is reversed so outward orientation is preserved.
    pub fn mirrored(&self) -> HandRig {
        let flip = |p: &Vector3<f64>| Vector3::new(-p.x, p.y, p.z);
        HandRig {
            template_vertices: self.template_vertices.iter().map(flip).collect(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
            parent_index: self.parent_index.clone(),
            joint_rest_positions: self.joint_rest_positions.iter().map(flip).collect(),
            skin_weights: self.skin_weights.clone(),
            sparse_weights: self.sparse_weights.clone(),
        }
    }

    /// The template as a triangle mesh.
    pub fn template_mesh(&self) -> TriMesh {
        TriMesh {
            vertices: self.template_vertices.clone(),
            faces: self.faces.clone(),
        }
    }

    /// Mesh with the given posed vertices and the rig's faces.
    pub fn posed_mesh(&self, vertices: Vec<Vector3<f64>>) -> TriMesh {
        TriMesh {
            vertices,
            faces: self.faces.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Rig file format (JSON)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RigFile {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    parent_index: Vec<usize>,
    joint_rest_positions: Vec<[f64; 3]>,
    /// Row-major V x J skinning weights.
    skin_weights: Vec<Vec<f64>>,
}

impl HandRig {
    pub fn to_json(&self) -> serde_json::Value {
        let file = RigFile {
            vertices: self.template_vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: self.faces.clone(),
            parent_index: self.parent_index.clone(),
            joint_rest_positions: self
                .joint_rest_positions
                .iter()
                .map(|v| [v.x, v.y, v.z])
                .collect(),
            skin_weights: self
                .skin_weights
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        };
        serde_json::to_value(file).expect("rig serialization cannot fail")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let file: RigFile = serde_json::from_value(value)?;
        let v = file.vertices.len();
        let j = file.joint_rest_positions.len();
        let mut weights = Array2::zeros((v, j));
        if file.skin_weights.len() != v {
            return Err(Error::InvalidRig("skin_weights row count mismatch".into()));
        }
        for (i, row) in file.skin_weights.iter().enumerate() {
            if row.len() != j {
                return Err(Error::InvalidRig(format!(
                    "skin_weights row {i} has length {}, expected {j}",
                    row.len()
                )));
            }
            for (jj, &w) in row.iter().enumerate() {
                weights[(i, jj)] = w;
            }
        }
        HandRig::new(
            file.vertices.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            file.faces,
            file.parent_index,
            file.joint_rest_positions
                .iter()
                .map(|p| Vector3::new(p[0], p[1], p[2]))
                .collect(),
            weights,
        )
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_json_pretty(path, &self.to_json())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        HandRig::from_json(crate::io::read_json(path)?)
    }
}

// ---------------------------------------------------------------------------
// Forward kinematics
// ---------------------------------------------------------------------------

/// Posed hand geometry.
#[derive(Debug, Clone)]
pub struct FkOut {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
}

/// Per-joint world linear parts plus rotation caches, for backprop.
pub struct FkCache {
    linear: Vec<Matrix3<f64>>,
    local_trans: Vec<Vector3<f64>>,
    rot_caches: Vec<Rot6dCache>,
}

/// Runs the kinematic chain: per-joint local rotations about their rest
/// positions composed down the tree, then a global root rotation about the
/// origin plus translation, then linear blend skinning of the template.
pub fn forward_kinematics(rig: &HandRig, pose: &HandPose) -> FkOut {
    let (out, _) = forward_kinematics_cached(rig, pose);
    out
}

pub fn forward_kinematics_cached(rig: &HandRig, pose: &HandPose) -> (FkOut, FkCache) {
    let j_count = rig.joint_rest_positions.len();
    let mut rot_caches = Vec::with_capacity(j_count);
    rot_caches.push(rot6d_forward(&pose.root_rot));
    for r in &pose.joint_rots {
        rot_caches.push(rot6d_forward(r));
    }

    let mut linear = vec![Matrix3::identity(); j_count];
    let mut offset = vec![Vector3::zeros(); j_count];
    let mut local_trans = vec![Vector3::zeros(); j_count];

    // Root rotates about the template origin and carries the translation.
    linear[0] = rot_caches[0].rotation;
    offset[0] = pose.trans;
    local_trans[0] = pose.trans;

    for j in 1..j_count {
        let p = rig.parent_index[j];
        let rot = rot_caches[j].rotation;
        let rest = rig.joint_rest_positions[j];
        let c = rest - rot * rest; // rotation about the joint's rest position
        linear[j] = linear[p] * rot;
        offset[j] = linear[p] * c + offset[p];
        local_trans[j] = c;
    }

    let joints = (0..j_count)
        .map(|j| linear[j] * rig.joint_rest_positions[j] + offset[j])
        .collect();

    let vertices = rig
        .template_vertices
        .iter()
        .zip(&rig.sparse_weights)
        .map(|(u, weights)| {
            let mut v = Vector3::zeros();
            for &(j, w) in weights {
                v += (linear[j] * u + offset[j]) * w;
            }
            v
        })
        .collect();

    (
        FkOut { vertices, joints },
        FkCache {
            linear,
            local_trans,
            rot_caches,
        },
    )
}

/// Backpropagates gradients on posed vertices and joints to the flattened
/// 99-dim pose parameters. `d_vertices` / `d_joints` may be empty to skip.
pub fn fk_backward(
    rig: &HandRig,
    cache: &FkCache,
    d_vertices: &[Vector3<f64>],
    d_joints: &[Vector3<f64>],
) -> [f64; POSE_DIM] {
    let j_count = rig.joint_rest_positions.len();
    let mut d_linear = vec![Matrix3::zeros(); j_count];
    let mut d_offset = vec![Vector3::zeros(); j_count];

    if !d_vertices.is_empty() {
        assert_eq!(d_vertices.len(), rig.vertex_count());
        for (i, dv) in d_vertices.iter().enumerate() {
            let u = rig.template_vertices[i];
            for &(j, w) in &rig.sparse_weights[i] {
                let dvw = dv * w;
                d_linear[j] += dvw * u.transpose();
                d_offset[j] += dvw;
            }
        }
    }
    if !d_joints.is_empty() {
        assert_eq!(d_joints.len(), j_count);
        for j in 0..j_count {
            d_linear[j] += d_joints[j] * rig.joint_rest_positions[j].transpose();
            d_offset[j] += d_joints[j];
        }
    }

    let mut grad = [0.0; POSE_DIM];
    // Children before parents: push gradient up the tree and peel off the
    // local rotation at each joint.
    for j in (1..j_count).rev() {
        let p = rig.parent_index[j];
        let rot = cache.rot_caches[j].rotation;
        let parent_lin_t = cache.linear[p].transpose();

        let da = d_linear[j];
        let db = d_offset[j];
        let d_parent_lin = da * rot.transpose() + db * cache.local_trans[j].transpose();
        let d_rot =
            parent_lin_t * da - (parent_lin_t * db) * rig.joint_rest_positions[j].transpose();

        d_linear[p] += d_parent_lin;
        d_offset[p] += db;

        let g6 = rot6d_backward(&cache.rot_caches[j], &d_rot);
        grad[9 + 6 * (j - 1)..15 + 6 * (j - 1)].copy_from_slice(&g6);
    }
    let g_root = rot6d_backward(&cache.rot_caches[0], &d_linear[0]);
    grad[3..9].copy_from_slice(&g_root);
    grad[0..3].copy_from_slice(d_offset[0].as_slice());
    grad
}

/// Minimal articulated rig for cross-module tests: joint 1 at (1,0,0),
/// joints 2..15 parked at the origin, four vertices on joints 0/1.
#[cfg(test)]
pub(crate) fn test_rig_two_bone() -> HandRig {
    let vertices = vec![
        Vector3::new(0.5, 0.0, 0.0),
        Vector3::new(1.5, 0.0, 0.0),
        Vector3::new(1.5, 0.0, 0.0),
        Vector3::new(2.0, 0.0, 0.0),
    ];
    let faces = vec![[0, 1, 2], [1, 3, 2]];
    let mut parent = vec![0; JOINT_COUNT];
    parent[1] = 0;
    let mut rest = vec![Vector3::zeros(); JOINT_COUNT];
    rest[1] = Vector3::new(1.0, 0.0, 0.0);
    let mut w = Array2::zeros((4, JOINT_COUNT));
    w[(0, 0)] = 1.0;
    w[(1, 1)] = 1.0;
    w[(2, 0)] = 0.5;
    w[(2, 1)] = 0.5;
    w[(3, 1)] = 1.0;
    HandRig::new(vertices, faces, parent, rest, w).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        // Uniform rotation via a normalized random quaternion.
        use nalgebra::{Quaternion, UnitQuaternion};
        let q = loop {
            let q = Quaternion::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            if q.norm() > 1e-3 {
                break q;
            }
        };
        UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
    }

    fn rz(theta: f64) -> Matrix3<f64> {
        Matrix3::new(
            theta.cos(),
            -theta.sin(),
            0.0,
            theta.sin(),
            theta.cos(),
            0.0,
            0.0,
            0.0,
            1.0,
        )
    }

    #[test]
    fn rot6d_identity() {
        let r = rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn rot6d_z90() {
        let r = rot6d_to_matrix(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(r, rz(std::f64::consts::FRAC_PI_2), epsilon = 1e-12);
    }

    #[test]
    fn rot6d_scale_invariant() {
        let r = rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn rot6d_degenerate_inputs_still_rotations() {
        for r6 in [
            [0.0; 6],
            [0.0, 0.0, 0.0, 1.0, 2.0, 3.0],
            [1.0, 0.0, 0.0, 2.0, 0.0, 0.0], // parallel halves
            [0.0, 0.0, 1e-12, 1e-12, 0.0, 0.0],
        ] {
            let r = rot6d_to_matrix(&r6);
            assert_abs_diff_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-9);
            assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn matrix_to_rot6d_readoff() {
        assert_eq!(
            matrix_to_rot6d(&Matrix3::identity()),
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        let r6 = matrix_to_rot6d(&rz(std::f64::consts::FRAC_PI_2));
        let expect = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for k in 0..6 {
            assert_abs_diff_eq!(r6[k], expect[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn rot6d_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&r));
            assert_abs_diff_eq!(back, r, epsilon = 1e-6);
        }
    }

    #[test]
    fn rot6d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut r6 = [0.0; 6];
            for v in &mut r6 {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
            // Scalar loss: weighted sum of matrix entries.
            let mut w = [[0.0; 3]; 3];
            for row in &mut w {
                for v in row.iter_mut() {
                    *v = rng.random::<f64>() * 2.0 - 1.0;
                }
            }
            let loss = |r6: &[f64; 6]| {
                let m = rot6d_to_matrix(r6);
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += w[i][j] * m[(i, j)];
                    }
                }
                s
            };
            let cache = rot6d_forward(&r6);
            let d_rot = Matrix3::from_fn(|i, j| w[i][j]);
            let grad = rot6d_backward(&cache, &d_rot);
            let h = 1e-6;
            for k in 0..6 {
                let mut plus = r6;
                plus[k] += h;
                let mut minus = r6;
                minus[k] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert_abs_diff_eq!(grad[k], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn flatten_round_trip() {
        let zero = BimanualPose {
            left: HandPose::zeros(),
            right: HandPose::zeros(),
            left_present: true,
            right_present: true,
        };
        assert_eq!(zero.flatten(), [0.0; BIMANUAL_DIM]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut flat = [0.0; BIMANUAL_DIM];
        for v in &mut flat {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        let pose = BimanualPose::from_slice(&flat).unwrap();
        assert_eq!(pose.flatten(), flat);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        assert!(matches!(
            BimanualPose::from_slice(&[0.0; 197]),
            Err(Error::PoseLength { expected: 198, got: 197 })
        ));
        assert!(HandPose::from_slice(&[0.0; 98]).is_err());
    }

    pub(crate) fn two_bone_rig() -> HandRig {
        super::test_rig_two_bone()
    }

    #[test]
    fn fk_identity_reproduces_template() {
        let rig = two_bone_rig();
        let out = forward_kinematics(&rig, &HandPose::identity());
        for (a, b) in out.vertices.iter().zip(&rig.template_vertices) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        for (a, b) in out.joints.iter().zip(&rig.joint_rest_positions) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn fk_translation_only() {
        let rig = two_bone_rig();
        let mut pose = HandPose::identity();
        pose.trans = Vector3::new(0.0, 0.0, 0.1);
        let out = forward_kinematics(&rig, &pose);
        for (a, b) in out.vertices.iter().zip(&rig.template_vertices) {
            assert_abs_diff_eq!(a, &(b + Vector3::new(0.0, 0.0, 0.1)), epsilon = 1e-15);
        }
    }

    #[test]
    fn fk_two_bone_manual_lbs() {
        // Joint 1 rotated 90 deg about z; vertices rotate about (1,0,0).
        let rig = two_bone_rig();
        let mut pose = HandPose::identity();
        pose.joint_rots[0] = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        let out = forward_kinematics(&rig, &pose);
        assert_abs_diff_eq!(out.vertices[0], Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(out.vertices[1], Vector3::new(1.0, 0.5, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(out.vertices[2], Vector3::new(1.25, 0.25, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(out.vertices[3], Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(out.joints[1], Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_rigid_equivariance() {
        let rig = two_bone_rig();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let mut flat = [0.0; POSE_DIM];
            for v in &mut flat {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
            let pose = HandPose::from_slice(&flat).unwrap();
            let q = random_rotation(&mut rng);
            let t = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let base = forward_kinematics(&rig, &pose);
            let moved = forward_kinematics(&rig, &pose.apply_global(&q, &t));
            for (a, b) in moved.vertices.iter().zip(&base.vertices) {
                assert_abs_diff_eq!(a, &(q * b + t), epsilon = 1e-6);
            }
            for (a, b) in moved.joints.iter().zip(&base.joints) {
                assert_abs_diff_eq!(a, &(q * b + t), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn fk_backward_matches_finite_differences() {
        let rig = two_bone_rig();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut flat = [0.0; POSE_DIM];
            for v in &mut flat {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
            let n_v = rig.vertex_count();
            let dv: Vec<Vector3<f64>> = (0..n_v)
                .map(|_| {
                    Vector3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    )
                })
                .collect();
            let dj: Vec<Vector3<f64>> = (0..JOINT_COUNT)
                .map(|_| {
                    Vector3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    )
                })
                .collect();
            let loss = |flat: &[f64; POSE_DIM]| {
                let pose = HandPose::from_slice(flat).unwrap();
                let out = forward_kinematics(&rig, &pose);
                let mut s = 0.0;
                for (v, d) in out.vertices.iter().zip(&dv) {
                    s += v.dot(d);
                }
                for (j, d) in out.joints.iter().zip(&dj) {
                    s += j.dot(d);
                }
                s
            };
            let pose = HandPose::from_slice(&flat).unwrap();
            let (_, cache) = forward_kinematics_cached(&rig, &pose);
            let grad = fk_backward(&rig, &cache, &dv, &dj);
            let h = 1e-6;
            for k in 0..POSE_DIM {
                let mut plus = flat;
                plus[k] += h;
                let mut minus = flat;
                minus[k] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert_abs_diff_eq!(grad[k], fd, epsilon = 2e-5);
            }
        }
    }
}
