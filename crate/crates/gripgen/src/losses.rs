//! Training objectives: the stage-1 map loss (BCE on contact probabilities
//! plus gated L2 on correspondence embeddings) and the six-term stage-2
//! pose loss (parameter L1, FK joint and joint-velocity terms, contact
//! attraction, map consistency and a signed-distance penetration hinge).
//!
//! Every term returns an analytic gradient w.r.t. the predicted signal;
//! the geometric terms backpropagate through forward kinematics.

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::contact::{prob_to_distance, ContactFrame, ContactSequence};
use crate::embedding::{nearest_by_embedding, EmbeddingTable};
use crate::error::{Error, Result};
use crate::hand::{
    fk_backward, forward_kinematics, forward_kinematics_cached, BimanualPose, FkOut, HandRig,
    BIMANUAL_DIM, JOINT_COUNT, POSE_DIM,
};
use crate::mesh::SignedDistanceField;
use crate::residual::embedding_matches;

const PROB_EPS: f64 = 1e-7;

/// Coefficients of every loss term across both stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub contact: f64,
    pub embedding: f64,
    pub data: f64,
    pub penetration: f64,
    pub joints: f64,
    pub velocity: f64,
    pub attraction: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            contact: 1.0,
            embedding: 1.0,
            data: 1.0,
            penetration: 10.0,
            joints: 1.0,
            velocity: 1.0,
            attraction: 0.5,
            consistency: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("contact", self.contact),
            ("embedding", self.embedding),
            ("data", self.data),
            ("penetration", self.penetration),
            ("joints", self.joints),
            ("velocity", self.velocity),
            ("attraction", self.attraction),
            ("consistency", self.consistency),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "loss weight {name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

/// Unweighted component values plus the gradient of the weighted total.
#[derive(Debug, Clone)]
pub struct Stage1Loss {
    pub total: f64,
    pub contact: f64,
    pub embedding: f64,
    pub grad: Array2<f64>,
}

/// BCE over all contact channels plus L2 on embedding rows gated by ground
/// truth contact probability > 0.5. Predictions are clamped into (0, 1)
/// inside the BCE; `frame_mask` zeroes padded frames out of both terms.
pub fn stage1_loss(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    point_count: usize,
    emb_dim: usize,
    frame_mask: &[f64],
    weights: &LossWeights,
) -> Result<Stage1Loss> {
    weights.validate()?;
    let stride = 1 + emb_dim;
    let row_dim = point_count * 2 * stride;
    if pred.raw_dim() != gt.raw_dim() || pred.ncols() != row_dim || pred.nrows() != frame_mask.len()
    {
        return Err(Error::ShapeMismatch(format!(
            "stage1 loss: pred {:?}, gt {:?}, expected cols {row_dim}, frames {}",
            pred.shape(),
            gt.shape(),
            frame_mask.len()
        )));
    }
    let valid_frames: f64 = frame_mask.iter().sum();
    if valid_frames == 0.0 {
        return Err(Error::EmptyInput("stage1 loss with no valid frames".into()));
    }
    let contact_count = valid_frames * (point_count * 2) as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut contact_sum = 0.0;
    let mut emb_sum = 0.0;
    let mut gated = 0usize;

    // First pass for the gated embedding count so the normalization is knowable.
    for (l, &m) in frame_mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for qh in 0..point_count * 2 {
            if gt[(l, qh * stride)] > 0.5 {
                gated += 1;
            }
        }
    }
    let emb_count = gated.max(1) as f64;

    for (l, &m) in frame_mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for qh in 0..point_count * 2 {
            let base = qh * stride;
            let target = gt[(l, base)];
            let raw = pred[(l, base)];
            let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            contact_sum += -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
            if raw > PROB_EPS && raw < 1.0 - PROB_EPS {
                grad[(l, base)] +=
                    weights.contact * (p - target) / (p * (1.0 - p)) / contact_count;
            }
            if target > 0.5 {
                for k in 0..emb_dim {
                    let diff = pred[(l, base + 1 + k)] - gt[(l, base + 1 + k)];
                    emb_sum += diff * diff;
                    grad[(l, base + 1 + k)] += weights.embedding * 2.0 * diff / emb_count;
                }
            }
        }
    }

    let contact = contact_sum / contact_count;
    let embedding = emb_sum / emb_count;
    Ok(Stage1Loss {
        total: weights.contact * contact + weights.embedding * embedding,
        contact,
        embedding,
        grad,
    })
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

/// Per-frame quantities derived from the ground-truth maps and the embedding
/// table alone; they do not depend on predictions and are precomputed once
/// per scene.
#[derive(Debug, Clone)]
pub struct FrameSupervision {
    /// Embedding-nearest hand vertex for every map point, n x 2.
    pub map_nearest_vertex: Array2<usize>,
    /// Target distance recovered from the contact probability, n x 2.
    pub target_distance: Array2<f64>,
    /// Attraction weight per hand vertex (similarity x contact of its
    /// matched map point), V x 2; zero when the channel is fully masked.
    pub attraction_weight: Array2<f64>,
}

pub fn precompute_supervision(
    frame: &ContactFrame,
    table: &EmbeddingTable,
    sigma_c: f64,
) -> Result<FrameSupervision> {
    let n = frame.point_count();
    let v = table.vertex_count();
    let dim = table.dim();
    let mut map_nearest_vertex = Array2::zeros((n, 2));
    let mut target_distance = Array2::zeros((n, 2));
    for q in 0..n {
        for h in 0..2 {
            let row = frame.embedding_map.slice(ndarray::s![q, h, ..]);
            let row = row.to_owned();
            map_nearest_vertex[(q, h)] =
                nearest_by_embedding(row.view(), table.values.view())?;
            target_distance[(q, h)] = prob_to_distance(frame.contact[(q, h)], sigma_c);
        }
    }
    let (_, weight) = embedding_matches(table, frame);
    debug_assert_eq!(weight.shape(), [v, 2]);
    debug_assert!(dim > 0);
    Ok(FrameSupervision {
        map_nearest_vertex,
        target_distance,
        attraction_weight: weight,
    })
}

/// FK results for both hands of one ground-truth frame.
#[derive(Debug, Clone)]
pub struct PosedHands {
    pub left: FkOut,
    pub right: FkOut,
}

pub fn pose_gt_hands(left_rig: &HandRig, right_rig: &HandRig, pose: &BimanualPose) -> PosedHands {
    PosedHands {
        left: forward_kinematics(left_rig, &pose.left),
        right: forward_kinematics(right_rig, &pose.right),
    }
}

/// Unweighted stage-2 component values; the total applies the weights.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Stage2Components {
    pub data: f64,
    pub penetration: f64,
    pub joints: f64,
    pub velocity: f64,
    pub attraction: f64,
    pub consistency: f64,
    pub total: f64,
}

pub struct Stage2Loss {
    pub components: Stage2Components,
    pub grad: Array2<f64>,
}

/// Everything the stage-2 loss needs besides the prediction itself.
pub struct Stage2Inputs<'a> {
    pub gt: &'a Array2<f64>,
    pub left_rig: &'a HandRig,
    pub right_rig: &'a HandRig,
    /// Ground-truth maps aligned with the frames (supervision, not the
    /// possibly-masked network condition).
    pub maps: &'a ContactSequence,
    pub supervision: &'a [FrameSupervision],
    pub gt_fk: &'a [PosedHands],
    /// Per-frame signed distance field of the posed object, for the
    /// penetration hinge. `None` disables the term.
    pub objects: Option<&'a [&'a dyn SignedDistanceField]>,
    pub presence: [bool; 2],
    pub frame_mask: &'a [f64],
    pub weights: &'a LossWeights,
    /// Penetration warmup gate; the term is skipped entirely when false.
    pub penetration_enabled: bool,
}

pub fn stage2_loss(pred: &Array2<f64>, inputs: &Stage2Inputs<'_>) -> Result<Stage2Loss> {
    inputs.weights.validate()?;
    let frames = pred.nrows();
    if pred.ncols() != BIMANUAL_DIM {
        return Err(Error::ShapeMismatch(format!(
            "stage2 pred width {} != {BIMANUAL_DIM}",
            pred.ncols()
        )));
    }
    if inputs.gt.raw_dim() != pred.raw_dim()
        || inputs.frame_mask.len() != frames
        || inputs.maps.len() != frames
        || inputs.supervision.len() != frames
        || inputs.gt_fk.len() != frames
        || inputs.objects.is_some_and(|o| o.len() != frames)
    {
        return Err(Error::ShapeMismatch(
            "stage2 loss: inconsistent frame counts".into(),
        ));
    }
    let rigs = [inputs.left_rig, inputs.right_rig];
    let vertex_count = rigs[0].vertex_count();
    if rigs[1].vertex_count() != vertex_count {
        return Err(Error::ShapeMismatch("rigs disagree on vertex count".into()));
    }
    let w = inputs.weights;

    let hands: Vec<usize> = (0..2).filter(|&h| inputs.presence[h]).collect();
    let valid: Vec<usize> = (0..frames).filter(|&l| inputs.frame_mask[l] > 0.0).collect();
    if valid.is_empty() {
        return Err(Error::EmptyInput("stage2 loss with no valid frames".into()));
    }
    let pair_count = valid
        .windows(2)
        .filter(|pair| pair[1] == pair[0] + 1)
        .count();

    let data_count = (valid.len() * BIMANUAL_DIM) as f64;
    let joints_count = (valid.len() * hands.len().max(1) * JOINT_COUNT) as f64;
    let vel_count = (pair_count * hands.len().max(1) * JOINT_COUNT).max(1) as f64;
    let att_count = (valid.len() * hands.len().max(1) * vertex_count) as f64;
    let consist_count = (valid.len() * hands.len().max(1) * inputs.maps.point_count()) as f64;
    let pen_count = (valid.len() * hands.len().max(1)) as f64;

    let mut grad = Array2::zeros(pred.raw_dim());
    let mut comp = Stage2Components::default();

    // Parameter L1 over every frame and both hands, present or not.
    for &l in &valid {
        for c in 0..BIMANUAL_DIM {
            let diff = pred[(l, c)] - inputs.gt[(l, c)];
            comp.data += diff.abs();
            grad[(l, c)] += w.data * diff.signum() / data_count;
        }
    }
    comp.data /= data_count;

    if !hands.is_empty() {
        // Pose every valid frame once, keeping caches for the backward pass.
        let mut fk = Vec::with_capacity(valid.len());
        for &l in &valid {
            let row = pred.row(l);
            let pose = BimanualPose::from_slice(row.as_slice().expect("contiguous"))?;
            let left = forward_kinematics_cached(rigs[0], &pose.left);
            let right = forward_kinematics_cached(rigs[1], &pose.right);
            fk.push([left, right]);
        }

        // Gradient buffers per valid frame and hand.
        let mut d_verts =
            vec![[vec![Vector3::zeros(); vertex_count], vec![Vector3::zeros(); vertex_count]]; valid.len()];
        let mut d_joints =
            vec![[vec![Vector3::zeros(); JOINT_COUNT], vec![Vector3::zeros(); JOINT_COUNT]]; valid.len()];

        for (vi, &l) in valid.iter().enumerate() {
            let frame = &inputs.maps.frames[l];
            let sup = &inputs.supervision[l];
            let gt_fk = &inputs.gt_fk[l];
            for &h in &hands {
                let (out, _) = &fk[vi][h];
                let gt_out = if h == 0 { &gt_fk.left } else { &gt_fk.right };

                // Joint position term.
                for j in 0..JOINT_COUNT {
                    let diff = out.joints[j] - gt_out.joints[j];
                    comp.joints += diff.norm_squared();
                    d_joints[vi][h][j] += diff * (2.0 * w.joints / joints_count);
                }

                // Attraction toward ground-truth vertices, weighted by the
                // contact-region match strength.
                for i in 0..vertex_count {
                    let weight = sup.attraction_weight[(i, h)];
                    if weight == 0.0 {
                        continue;
                    }
                    let diff = out.vertices[i] - gt_out.vertices[i];
                    comp.attraction += weight * diff.norm_squared();
                    d_verts[vi][h][i] += diff * (2.0 * w.attraction * weight / att_count);
                }

                // Map consistency: matched hand vertex should sit at the
                // distance the contact probability encodes.
                for q in 0..frame.point_count() {
                    let c = frame.contact[(q, h)];
                    if c <= 0.0 {
                        continue;
                    }
                    let i = sup.map_nearest_vertex[(q, h)];
                    let delta = out.vertices[i] - frame.surface_points[q];
                    let dist = delta.norm();
                    let dev = dist - sup.target_distance[(q, h)];
                    comp.consistency += c * dev * dev;
                    if dist > 1e-12 {
                        d_verts[vi][h][i] +=
                            delta * (2.0 * w.consistency * c * dev / (dist * consist_count));
                    }
                }

                // Penetration hinge on the signed distance field.
                if inputs.penetration_enabled {
                    if let Some(objects) = inputs.objects {
                        let field = objects[l];
                        for i in 0..vertex_count {
                            let (sd, sd_grad) = field.signed_distance_grad(&out.vertices[i]);
                            if sd < 0.0 {
                                comp.penetration += -sd;
                                d_verts[vi][h][i] -= sd_grad * (w.penetration / pen_count);
                            }
                        }
                    }
                }
            }
        }

        // Joint velocity term couples consecutive valid frames.
        for vi in 1..valid.len() {
            if valid[vi] != valid[vi - 1] + 1 {
                continue;
            }
            let (l_prev, l_cur) = (valid[vi - 1], valid[vi]);
            for &h in &hands {
                let cur = &fk[vi][h].0;
                let prev = &fk[vi - 1][h].0;
                let gt_cur = if h == 0 {
                    &inputs.gt_fk[l_cur].left
                } else {
                    &inputs.gt_fk[l_cur].right
                };
                let gt_prev = if h == 0 {
                    &inputs.gt_fk[l_prev].left
                } else {
                    &inputs.gt_fk[l_prev].right
                };
                for j in 0..JOINT_COUNT {
                    let dv = (cur.joints[j] - prev.joints[j])
                        - (gt_cur.joints[j] - gt_prev.joints[j]);
                    comp.velocity += dv.norm_squared();
                    let g = dv * (2.0 * w.velocity / vel_count);
                    d_joints[vi][h][j] += g;
                    d_joints[vi - 1][h][j] -= g;
                }
            }
        }

        // Push the vertex/joint gradients through the kinematic chain.
        for (vi, &l) in valid.iter().enumerate() {
            for &h in &hands {
                let (_, cache) = &fk[vi][h];
                let g99 = fk_backward(rigs[h], cache, &d_verts[vi][h], &d_joints[vi][h]);
                let offset = h * POSE_DIM;
                for k in 0..POSE_DIM {
                    grad[(l, offset + k)] += g99[k];
                }
            }
        }

        comp.joints /= joints_count;
        comp.velocity /= vel_count;
        comp.attraction /= att_count;
        comp.consistency /= consist_count;
        comp.penetration /= pen_count;
    }

    comp.total = w.data * comp.data
        + w.penetration * comp.penetration
        + w.joints * comp.joints
        + w.velocity * comp.velocity
        + w.attraction * comp.attraction
        + w.consistency * comp.consistency;
    Ok(Stage2Loss {
        components: comp,
        grad,
    })
}

/// Convenience: embedding row view of a map point.
pub fn map_embedding_row(frame: &ContactFrame, q: usize, h: usize) -> ArrayView1<'_, f64> {
    frame.embedding_map.slice(ndarray::s![q, h, ..])
}
