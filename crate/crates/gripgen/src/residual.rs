//! Residual guidance: per hand vertex, the displacement to its
//! embedding-matched object surface point, masked by contact probability
//! and weighted by embedding similarity. Recomputed at every reverse
//! diffusion step from the current noisy pose, it tells the denoiser how
//! far each contact region still is from where the maps say it should be.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};

use crate::contact::ContactFrame;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};

/// Weighted residuals for one frame: `r[i][h]` is
/// `phi(i, j*) * C[j*] * (h_i - b_{j*})`, zero where no map point has
/// positive contact probability.
#[derive(Debug, Clone)]
pub struct ResidualField {
    /// V x 2 x 3 weighted displacements in meters.
    pub residuals: Array3<f64>,
    /// V x 2 matched surface point index, -1 when the channel is unmatched.
    pub matched_index: Array2<i64>,
}

impl ResidualField {
    pub fn zeros(vertex_count: usize) -> Self {
        ResidualField {
            residuals: Array3::zeros((vertex_count, 2, 3)),
            matched_index: Array2::from_elem((vertex_count, 2), -1),
        }
    }

    /// Mean residual over one hand's vertices, the pooled network condition.
    pub fn mean_per_hand(&self, hand: usize) -> Vector3<f64> {
        let v = self.residuals.shape()[0];
        let mut sum = Vector3::zeros();
        for i in 0..v {
            sum += Vector3::new(
                self.residuals[(i, hand, 0)],
                self.residuals[(i, hand, 1)],
                self.residuals[(i, hand, 2)],
            );
        }
        sum / v as f64
    }
}

/// Embedding-space matching of hand vertices against a frame's map points:
/// for each vertex `i` and hand, `j* = argmin_j |E_i - E_map[j]|` over the
/// points with positive contact probability, plus the combined weight
/// `exp(-|E_i - E_map[j*]|) * C[j*]`. Channels with no positive contact
/// yield index -1 and weight 0. Depends only on embeddings and maps, never
/// on hand positions.
pub fn embedding_matches(
    table: &EmbeddingTable,
    frame: &ContactFrame,
) -> (Array2<i64>, Array2<f64>) {
    let v = table.vertex_count();
    let dim = table.dim().min(frame.embedding_map.shape()[2]);
    let n = frame.point_count();
    let mut matched = Array2::from_elem((v, 2), -1i64);
    let mut weight = Array2::zeros((v, 2));
    for h in 0..2 {
        let active: Vec<usize> = (0..n).filter(|&q| frame.contact[(q, h)] > 0.0).collect();
        if active.is_empty() {
            continue;
        }
        for i in 0..v {
            let e_i = table.values.row(i);
            let mut best_q = active[0];
            let mut best_d2 = f64::INFINITY;
            for &q in &active {
                let mut d2 = 0.0;
                for k in 0..dim {
                    let diff = e_i[k] - frame.embedding_map[(q, h, k)];
                    d2 += diff * diff;
                }
                if d2 < best_d2 {
                    best_d2 = d2;
                    best_q = q;
                }
            }
            matched[(i, h)] = best_q as i64;
            weight[(i, h)] = (-best_d2.sqrt()).exp() * frame.contact[(best_q, h)];
        }
    }
    (matched, weight)
}

/// Computes the residual field for one frame. For each hand vertex `i`, the
/// match `j* = argmin_j |E_i - E_map[j]|` runs over map points with positive
/// contact probability; fully masked channels yield zero rows (valid output,
/// not an error). Matching lives purely in embedding space, so translations
/// of the hand move residuals linearly without changing `j*`.
pub fn compute_residual(
    hand_vertices: [&[Vector3<f64>]; 2],
    table: &EmbeddingTable,
    frame: &ContactFrame,
) -> Result<ResidualField> {
    let v = table.vertex_count();
    let dim = table.dim();
    for verts in &hand_vertices {
        if verts.len() != v {
            return Err(Error::ShapeMismatch(format!(
                "hand has {} vertices, embedding table {v}",
                verts.len()
            )));
        }
    }
    if frame.embedding_map.shape()[2] != dim {
        return Err(Error::ShapeMismatch(format!(
            "map embedding dim {} vs table dim {dim}",
            frame.embedding_map.shape()[2]
        )));
    }
    let (matched, weight) = embedding_matches(table, frame);
    let mut field = ResidualField::zeros(v);
    for h in 0..2 {
        for i in 0..v {
            let q = matched[(i, h)];
            if q < 0 {
                continue;
            }
            let w = weight[(i, h)];
            let delta = hand_vertices[h][i] - frame.surface_points[q as usize];
            field.matched_index[(i, h)] = q;
            field.residuals[(i, h, 0)] = w * delta.x;
            field.residuals[(i, h, 1)] = w * delta.y;
            field.residuals[(i, h, 2)] = w * delta.z;
        }
    }
    Ok(field)
}

/// Debug dump of a residual field to the binary array format.
pub fn save_residual_field(field: &ResidualField, path: &std::path::Path) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "residual_field",
        "vertices": field.residuals.shape()[0],
    });
    let res = field.residuals.clone().into_dyn();
    let idx = field.matched_index.mapv(|v| v as f64).into_dyn();
    crate::io::write_arrays(path, &meta, &[("residuals", &res), ("matched_index", &idx)])
}
