//! Differential object-centric motion modeling: world <-> canonical
//! conversion of object trajectories and hand poses, and exact
//! re-integration of the differential form.
//!
//! A world trajectory stores per-frame rotation and translation (plus an
//! optional articulation angle for single-hinge objects). The canonical form
//! keeps only per-frame relative motion — the relative rotation
//! `w_l = R_{l-1}^T R_l`, the translation velocity
//! `v_l = R_{l-1}^T (D_l - D_{l-1})` and the articulation velocity — with
//! the first frame's pose as the anchor. This removes global pose from the
//! learning problem: any rigid transform of the whole scene leaves the
//! canonical features unchanged.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hand::{matrix_to_rot6d, rot6d_to_matrix, HandPose};
use crate::mesh::TriMesh;

/// One frame of an object's world-space rigid pose.
#[derive(Debug, Clone)]
pub struct ObjectFrame {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Articulation angle in radians; 0 for rigid objects.
    pub articulation: f64,
}

/// Object trajectory in world coordinates.
#[derive(Debug, Clone)]
pub struct ObjectSequenceWorld {
    pub frames: Vec<ObjectFrame>,
}

/// Per-frame relative motion in the object's canonical coordinate system.
#[derive(Debug, Clone)]
pub struct CanonicalMotionFrame {
    /// Relative rotation from the previous frame (identity at frame 0).
    pub relative_rotation: Matrix3<f64>,
    /// Translation velocity in the previous frame's coordinates, m/frame.
    pub velocity: Vector3<f64>,
    /// Articulation velocity, radians/frame.
    pub articulation_velocity: f64,
}

impl CanonicalMotionFrame {
    /// 6D encoding of the relative rotation, the network-facing form.
    pub fn rotation_6d(&self) -> [f64; 6] {
        matrix_to_rot6d(&self.relative_rotation)
    }
}

/// Canonical (differential) object motion plus the anchor needed to
/// re-integrate the world trajectory.
#[derive(Debug, Clone)]
pub struct ObjectMotionCanonical {
    pub frames: Vec<CanonicalMotionFrame>,
    pub anchor_rotation: Matrix3<f64>,
    pub anchor_translation: Vector3<f64>,
    pub anchor_articulation: f64,
}

impl ObjectSequenceWorld {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Differentiates a world trajectory into canonical relative motion.
/// Frame 0 has identity relative rotation and zero velocities.
pub fn world_to_canonical_object(seq: &ObjectSequenceWorld) -> Result<ObjectMotionCanonical> {
    if seq.frames.is_empty() {
        return Err(Error::EmptyInput("world_to_canonical_object".into()));
    }
    let mut frames = Vec::with_capacity(seq.frames.len());
    frames.push(CanonicalMotionFrame {
        relative_rotation: Matrix3::identity(),
        velocity: Vector3::zeros(),
        articulation_velocity: 0.0,
    });
    for l in 1..seq.frames.len() {
        let prev = &seq.frames[l - 1];
        let cur = &seq.frames[l];
        let prev_rot_t = prev.rotation.transpose();
        frames.push(CanonicalMotionFrame {
            relative_rotation: prev_rot_t * cur.rotation,
            velocity: prev_rot_t * (cur.translation - prev.translation),
            articulation_velocity: cur.articulation - prev.articulation,
        });
    }
    Ok(ObjectMotionCanonical {
        frames,
        anchor_rotation: seq.frames[0].rotation,
        anchor_translation: seq.frames[0].translation,
        anchor_articulation: seq.frames[0].articulation,
    })
}

/// Re-integrates canonical motion back to a world trajectory:
/// `R_l = R_{l-1} w_l`, `D_l = D_{l-1} + R_{l-1} v_l`, accumulating the
/// articulation angle. Rotations are re-orthonormalized every step.
pub fn integrate_canonical(motion: &ObjectMotionCanonical) -> ObjectSequenceWorld {
    let mut frames = Vec::with_capacity(motion.frames.len());
    let mut rotation = motion.anchor_rotation;
    let mut translation = motion.anchor_translation;
    let mut articulation = motion.anchor_articulation;
    for (l, f) in motion.frames.iter().enumerate() {
        if l > 0 {
            translation += rotation * f.velocity;
            rotation = renormalize_rotation(&(rotation * f.relative_rotation));
            articulation += f.articulation_velocity;
        }
        frames.push(ObjectFrame {
            rotation,
            translation,
            articulation,
        });
    }
    ObjectSequenceWorld { frames }
}

/// Projects a near-rotation back onto SO(3) (Gram-Schmidt on the first two
/// columns), preventing drift across long integrations.
pub fn renormalize_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    rot6d_to_matrix(&matrix_to_rot6d(m))
}

/// Expresses a world-frame hand pose in the object's canonical frame:
/// root rotation becomes `R^T r_root`, translation `R^T (T - D)`; finger
/// joint rotations are untouched.
pub fn canonicalize_hand(pose: &HandPose, r: &Matrix3<f64>, d: &Vector3<f64>) -> HandPose {
    let r_t = r.transpose();
    pose.apply_global(&r_t, &(-(r_t * d)))
}

/// Exact inverse of [`canonicalize_hand`].
pub fn decanonicalize_hand(pose: &HandPose, r: &Matrix3<f64>, d: &Vector3<f64>) -> HandPose {
    pose.apply_global(r, d)
}

// ---------------------------------------------------------------------------
// Articulation
// ---------------------------------------------------------------------------

/// Single revolute joint of an articulated object: the masked vertices
/// rotate about `axis` through `pivot` by the articulation angle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Articulation {
    pub axis: Vector3<f64>,
    pub pivot: Vector3<f64>,
    pub part_vertices: Vec<usize>,
}

impl Articulation {
    /// Rigid transform of the moving part for a given angle.
    pub fn part_transform(&self, angle: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let rot = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(self.axis),
            angle,
        )
        .into_inner();
        (rot, self.pivot - rot * self.pivot)
    }
}

/// Poses an object mesh in its canonical frame at the given articulation
/// angle. Rigid objects (no articulation) are returned unchanged.
pub fn pose_articulated_mesh(
    mesh: &TriMesh,
    articulation: Option<&Articulation>,
    angle: f64,
) -> TriMesh {
    let Some(art) = articulation else {
        return mesh.clone();
    };
    let (rot, trans) = art.part_transform(angle);
    let mut out = mesh.clone();
    for &i in &art.part_vertices {
        out.vertices[i] = rot * out.vertices[i] + trans;
    }
    out
}

// ---------------------------------------------------------------------------
// Serialization (trajectory JSON)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FrameFile {
    /// Row-major 3x3 rotation.
    #[serde(rename = "R")]
    r: [f64; 9],
    #[serde(rename = "D")]
    d: [f64; 3],
    a: f64,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    frames: Vec<FrameFile>,
}

impl ObjectSequenceWorld {
    pub fn to_json(&self) -> serde_json::Value {
        let file = TrajectoryFile {
            frames: self
                .frames
                .iter()
                .map(|f| FrameFile {
                    r: row_major(&f.rotation),
                    d: [f.translation.x, f.translation.y, f.translation.z],
                    a: f.articulation,
                })
                .collect(),
        };
        serde_json::to_value(file).expect("trajectory serialization cannot fail")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let file: TrajectoryFile = serde_json::from_value(value)?;
        let frames: Vec<ObjectFrame> = file
            .frames
            .iter()
            .map(|f| ObjectFrame {
                rotation: from_row_major(&f.r),
                translation: Vector3::new(f.d[0], f.d[1], f.d[2]),
                articulation: f.a,
            })
            .collect();
        for (l, f) in frames.iter().enumerate() {
            let err = (f.rotation * f.rotation.transpose() - Matrix3::identity()).norm();
            if err > 1e-6 {
                return Err(Error::InvalidParameter(format!(
                    "frame {l}: R is not a rotation (orthonormality error {err:.2e})"
                )));
            }
        }
        Ok(ObjectSequenceWorld { frames })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_json_pretty(path, &self.to_json())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(crate::io::read_json(path)?)
    }
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

fn from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}
