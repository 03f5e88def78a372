//! Ground-truth contact probability and correspondence maps on the
//! BPS-encoded object surface points, the probability <-> distance kernel
//! pair, and the training-time masking augmentation.
//!
//! Per frame and hand, every surface point stores the Gaussian-kernel
//! contact probability of its nearest hand vertex and a copy of that
//! vertex's correspondence embedding, identifying which hand region
//! touches it.

use nalgebra::Vector3;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};

/// Contact data of one frame over `n` surface points.
#[derive(Debug, Clone)]
pub struct ContactFrame {
    /// Encoded surface points (basis point + BPS direction), object frame.
    pub surface_points: Vec<Vector3<f64>>,
    /// Contact probabilities, n x 2 (left, right), in [0, 1].
    pub contact: Array2<f64>,
    /// Correspondence embeddings, n x 2 x d.
    pub embedding_map: Array3<f64>,
}

impl ContactFrame {
    pub fn zeros(n: usize, dim: usize) -> Self {
        ContactFrame {
            surface_points: vec![Vector3::zeros(); n],
            contact: Array2::zeros((n, 2)),
            embedding_map: Array3::zeros((n, 2, dim)),
        }
    }

    pub fn point_count(&self) -> usize {
        self.surface_points.len()
    }

    pub fn max_contact(&self) -> f64 {
        self.contact.iter().cloned().fold(0.0, f64::max)
    }

    fn zero_maps(&mut self) {
        self.contact.fill(0.0);
        self.embedding_map.fill(0.0);
    }
}

/// Contact frames over a sequence plus the kernel width they were built with.
#[derive(Debug, Clone)]
pub struct ContactSequence {
    pub frames: Vec<ContactFrame>,
    pub sigma_c: f64,
}

impl ContactSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.embedding_map.shape()[2])
    }

    pub fn point_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.point_count())
    }
}

/// Distance-to-contact-probability kernel `exp(-d^2 / (2 sigma^2))`.
/// Far distances underflow to exactly 0.
pub fn distance_to_prob(dist: f64, sigma_c: f64) -> f64 {
    (-dist * dist / (2.0 * sigma_c * sigma_c)).exp()
}

/// Inverse kernel: `d = sqrt(-2 sigma^2 ln C)`. Probabilities at or below
/// zero clamp to 1e-8 first (finite distance; the flag reports the clamp).
pub fn prob_to_distance_checked(prob: f64, sigma_c: f64) -> (f64, bool) {
    let clamped = prob <= 0.0;
    let p = if clamped { 1e-8 } else { prob.min(1.0) };
    ((-2.0 * sigma_c * sigma_c * p.ln()).max(0.0).sqrt(), clamped)
}

pub fn prob_to_distance(prob: f64, sigma_c: f64) -> f64 {
    prob_to_distance_checked(prob, sigma_c).0
}

/// Builds ground-truth maps: for each surface point and hand, the nearest
/// hand vertex sets the contact probability (by distance) and donates its
/// embedding. Absent hands produce zero columns. `hand_vertices[l][h]` are
/// the FK-posed vertices of hand `h` (0 = left, 1 = right) at frame `l`,
/// in the same (canonical) frame as the surface points.
pub fn build_gt_maps(
    surface_points: &[Vec<Vector3<f64>>],
    hand_vertices: &[[Option<Vec<Vector3<f64>>>; 2]],
    table: &EmbeddingTable,
    sigma_c: f64,
) -> Result<ContactSequence> {
    if sigma_c <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma_c must be positive, got {sigma_c}"
        )));
    }
    if surface_points.len() != hand_vertices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames of surface points vs {} frames of hands",
            surface_points.len(),
            hand_vertices.len()
        )));
    }
    let dim = table.dim();
    let mut frames = Vec::with_capacity(surface_points.len());
    for (points, hands) in surface_points.iter().zip(hand_vertices) {
        let n = points.len();
        let mut frame = ContactFrame {
            surface_points: points.clone(),
            contact: Array2::zeros((n, 2)),
            embedding_map: Array3::zeros((n, 2, dim)),
        };
        for (h, hand) in hands.iter().enumerate() {
            let Some(verts) = hand else { continue };
            if verts.len() != table.vertex_count() {
                return Err(Error::ShapeMismatch(format!(
                    "hand has {} vertices but embedding table has {}",
                    verts.len(),
                    table.vertex_count()
                )));
            }
            for (q, p) in points.iter().enumerate() {
                let mut best = 0usize;
                let mut best_d2 = f64::INFINITY;
                for (i, v) in verts.iter().enumerate() {
                    let d2 = (v - p).norm_squared();
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best = i;
                    }
                }
                frame.contact[(q, h)] = distance_to_prob(best_d2.sqrt(), sigma_c);
                for k in 0..dim {
                    frame.embedding_map[(q, h, k)] = table.values[(best, k)];
                }
            }
        }
        frames.push(frame);
    }
    Ok(ContactSequence { frames, sigma_c })
}

/// Training-time contact masking: with probability `full_p` the whole
/// sequence's maps are zeroed; otherwise a random `frame_p` fraction of
/// frames (rounded to a count) is zeroed. Deterministic given the seed.
pub fn mask_maps(
    seq: &ContactSequence,
    full_p: f64,
    frame_p: f64,
    seed: u64,
) -> Result<ContactSequence> {
    for (name, p) in [("full_p", full_p), ("frame_p", frame_p)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be in [0, 1], got {p}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = seq.clone();
    if rng.random::<f64>() < full_p {
        for frame in &mut out.frames {
            frame.zero_maps();
        }
        return Ok(out);
    }
    let l = seq.len();
    let count = (frame_p * l as f64).round() as usize;
    // Partial Fisher-Yates: the first `count` entries are a uniform draw
    // without replacement.
    let mut indices: Vec<usize> = (0..l).collect();
    for i in 0..count.min(l) {
        let j = rng.random_range(i..l);
        indices.swap(i, j);
    }
    for &f in indices.iter().take(count.min(l)) {
        out.frames[f].zero_maps();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization (binary arrays + JSON header)
// ---------------------------------------------------------------------------

impl ContactSequence {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let l = self.len();
        let n = self.point_count();
        let d = self.embedding_dim();
        let mut points = ArrayD::zeros(IxDyn(&[l, n, 3]));
        let mut contact = ArrayD::zeros(IxDyn(&[l, n, 2]));
        let mut emap = ArrayD::zeros(IxDyn(&[l, n, 2, d]));
        for (f, frame) in self.frames.iter().enumerate() {
            if frame.point_count() != n || frame.embedding_map.shape()[2] != d {
                return Err(Error::ShapeMismatch(
                    "inconsistent frame shapes in contact sequence".into(),
                ));
            }
            for q in 0..n {
                for k in 0..3 {
                    points[[f, q, k]] = frame.surface_points[q][k];
                }
                for h in 0..2 {
                    contact[[f, q, h]] = frame.contact[(q, h)];
                    for k in 0..d {
                        emap[[f, q, h, k]] = frame.embedding_map[(q, h, k)];
                    }
                }
            }
        }
        let meta = serde_json::json!({
            "kind": "contact_sequence",
            "frames": l,
            "points": n,
            "embedding_dim": d,
            "sigma_c": self.sigma_c,
            "layout": "row-major",
        });
        crate::io::write_arrays(
            path,
            &meta,
            &[
                ("surface_points", &points),
                ("contact", &contact),
                ("embedding_map", &emap),
            ],
        )
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = crate::io::read_arrays(path)?;
        let sigma_c = file.meta["sigma_c"]
            .as_f64()
            .ok_or_else(|| Error::Format("contact file missing sigma_c".into()))?;
        let points = file.get("surface_points")?;
        let contact = file.get("contact")?;
        let emap = file.get("embedding_map")?;
        let (l, n) = (points.shape()[0], points.shape()[1]);
        let d = emap.shape()[3];
        let mut frames = Vec::with_capacity(l);
        for f in 0..l {
            let mut frame = ContactFrame::zeros(n, d);
            for q in 0..n {
                frame.surface_points[q] =
                    Vector3::new(points[[f, q, 0]], points[[f, q, 1]], points[[f, q, 2]]);
                for h in 0..2 {
                    frame.contact[(q, h)] = contact[[f, q, h]];
                    for k in 0..d {
                        frame.embedding_map[(q, h, k)] = emap[[f, q, h, k]];
                    }
                }
            }
            frames.push(frame);
        }
        Ok(ContactSequence { frames, sigma_c })
    }
}
