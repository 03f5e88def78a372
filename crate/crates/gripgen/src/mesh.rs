//! Triangle mesh utilities: geodesic distances over the edge graph, minimum
//! bounding spheres, basis-point-set encoding, closest-point and signed
//! distance queries, and voxelized intersection volume.

use std::collections::{BinaryHeap, HashMap};

use nalgebra::Vector3;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain indexed triangle mesh. Positions are in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn aabb(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        Some((lo, hi))
    }

    pub fn translated(&self, t: &Vector3<f64>) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| v + t).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn transformed(&self, r: &nalgebra::Matrix3<f64>, t: &Vector3<f64>) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| r * v + t).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Unique undirected edges with self-edges dropped.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                if a == b {
                    continue;
                }
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// True when every directed edge is matched by exactly one reverse edge,
    /// i.e. the mesh is closed and consistently oriented.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(usize, usize), i64> = HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                if a == b {
                    return false;
                }
                *directed.entry((a, b)).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

/// Axis-aligned box surface with each face subdivided into an n x n grid,
/// centered at `center`. Watertight, outward-oriented.
pub fn box_mesh(half_extents: Vector3<f64>, center: Vector3<f64>, subdiv: usize) -> TriMesh {
    let n = subdiv.max(1);
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut faces = Vec::new();
    let mut index: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let quant = |v: &Vector3<f64>| {
        (
            (v.x * 1e9).round() as i64,
            (v.y * 1e9).round() as i64,
            (v.z * 1e9).round() as i64,
        )
    };
    let mut vertex_at = |p: Vector3<f64>, vertices: &mut Vec<Vector3<f64>>| -> usize {
        let key = quant(&p);
        if let Some(&i) = index.get(&key) {
            return i;
        }
        vertices.push(p);
        index.insert(key, vertices.len() - 1);
        vertices.len() - 1
    };

    // For each face: normal axis and two tangent axes with outward winding.
    let axes: [(usize, f64, usize, usize); 6] = [
        (0, 1.0, 1, 2),
        (0, -1.0, 2, 1),
        (1, 1.0, 2, 0),
        (1, -1.0, 0, 2),
        (2, 1.0, 0, 1),
        (2, -1.0, 1, 0),
    ];
    for (axis, sign, u_axis, v_axis) in axes {
        for iu in 0..n {
            for iv in 0..n {
                let corner = |du: usize, dv: usize| {
                    let mut p = Vector3::zeros();
                    p[axis] = sign * half_extents[axis];
                    p[u_axis] = (-1.0 + 2.0 * (iu + du) as f64 / n as f64) * half_extents[u_axis];
                    p[v_axis] = (-1.0 + 2.0 * (iv + dv) as f64 / n as f64) * half_extents[v_axis];
                    center + p
                };
                let i00 = vertex_at(corner(0, 0), &mut vertices);
                let i10 = vertex_at(corner(1, 0), &mut vertices);
                let i01 = vertex_at(corner(0, 1), &mut vertices);
                let i11 = vertex_at(corner(1, 1), &mut vertices);
                faces.push([i00, i10, i11]);
                faces.push([i00, i11, i01]);
            }
        }
    }
    TriMesh { vertices, faces }
}

/// Icosphere: subdivided icosahedron projected onto a sphere.
pub fn icosphere(radius: f64, center: Vector3<f64>, subdivisions: usize) -> TriMesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = vec![
        Vector3::new(-1.0, phi, 0.0),
        Vector3::new(1.0, phi, 0.0),
        Vector3::new(-1.0, -phi, 0.0),
        Vector3::new(1.0, -phi, 0.0),
        Vector3::new(0.0, -1.0, phi),
        Vector3::new(0.0, 1.0, phi),
        Vector3::new(0.0, -1.0, -phi),
        Vector3::new(0.0, 1.0, -phi),
        Vector3::new(phi, 0.0, -1.0),
        Vector3::new(phi, 0.0, 1.0),
        Vector3::new(-phi, 0.0, -1.0),
        Vector3::new(-phi, 0.0, 1.0),
    ];
    for v in &mut vertices {
        v.normalize_mut();
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = (vertices[a] + vertices[b]).normalize();
                    vertices.push(m);
                    vertices.len() - 1
                });
            }
            new_faces.push([f[0], mid[0], mid[2]]);
            new_faces.push([f[1], mid[1], mid[0]]);
            new_faces.push([f[2], mid[2], mid[1]]);
            new_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = new_faces;
    }

    TriMesh {
        vertices: vertices.iter().map(|v| center + v * radius).collect(),
        faces,
    }
}

// ---------------------------------------------------------------------------
// Geodesic distances
// ---------------------------------------------------------------------------

struct HeapNode {
    vertex: usize,
    dist: f64,
}

impl PartialEq for HeapNode {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist
    }
}
impl Eq for HeapNode {}
impl PartialOrd for HeapNode {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapNode {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap by distance.
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

/// All-pairs shortest path distances over the mesh edge graph with Euclidean
/// edge weights. Errors on disconnected meshes, reporting component sizes.
pub fn geodesic_matrix(mesh: &TriMesh) -> Result<Array2<f64>> {
    let n = mesh.vertices.len();
    if n == 0 {
        return Err(Error::EmptyInput("geodesic_matrix on empty mesh".into()));
    }
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (a, b) in mesh.edges() {
        let w = (mesh.vertices[a] - mesh.vertices[b]).norm();
        adj[a].push((b, w));
        adj[b].push((a, w));
    }

    // Connectivity check before the expensive part.
    let sizes = component_sizes(n, &adj);
    if sizes.len() > 1 {
        return Err(Error::DisconnectedMesh {
            components: sizes.len(),
            sizes,
        });
    }

    let mut out = Array2::from_elem((n, n), f64::INFINITY);
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    for src in 0..n {
        dist.fill(f64::INFINITY);
        done.fill(false);
        dist[src] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapNode {
            vertex: src,
            dist: 0.0,
        });
        while let Some(HeapNode { vertex, dist: d }) = heap.pop() {
            if done[vertex] {
                continue;
            }
            done[vertex] = true;
            for &(next, w) in &adj[vertex] {
                let nd = d + w;
                if nd < dist[next] {
                    dist[next] = nd;
                    heap.push(HeapNode {
                        vertex: next,
                        dist: nd,
                    });
                }
            }
        }
        for (j, &d) in dist.iter().enumerate() {
            out[(src, j)] = d;
        }
    }
    Ok(out)
}

fn component_sizes(n: usize, adj: &[Vec<(usize, f64)>]) -> Vec<usize> {
    let mut seen = vec![false; n];
    let mut sizes = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut size = 0;
        while let Some(v) = stack.pop() {
            size += 1;
            for &(u, _) in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        sizes.push(size);
    }
    sizes
}

// ---------------------------------------------------------------------------
// Minimum bounding sphere (Welzl)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Sphere {
    center: Vector3<f64>,
    radius: f64,
}

impl Sphere {
    fn none() -> Self {
        Sphere {
            center: Vector3::zeros(),
            radius: -1.0,
        }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        if self.radius < 0.0 {
            return false;
        }
        (p - self.center).norm_squared() <= self.radius * self.radius * (1.0 + 1e-12) + 1e-18
    }
}

/// Exact minimum enclosing sphere via Welzl's randomized recursion.
pub fn min_bounding_sphere(points: &[Vector3<f64>]) -> Result<(Vector3<f64>, f64)> {
    if points.is_empty() {
        return Err(Error::EmptyInput("min_bounding_sphere of no points".into()));
    }
    let mut shuffled: Vec<Vector3<f64>> = points.to_vec();
    // Deterministic shuffle: expected O(n) regardless of input order.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ba11);
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let mut boundary = Vec::with_capacity(4);
    let n = shuffled.len();
    let s = welzl(&shuffled, n, &mut boundary);
    Ok((s.center, s.radius.max(0.0)))
}

fn welzl(points: &[Vector3<f64>], n: usize, boundary: &mut Vec<Vector3<f64>>) -> Sphere {
    if n == 0 || boundary.len() == 4 {
        return trivial_sphere(boundary);
    }
    let p = points[n - 1];
    let s = welzl(points, n - 1, boundary);
    if s.contains(&p) {
        return s;
    }
    boundary.push(p);
    let s = welzl(points, n - 1, boundary);
    boundary.pop();
    s
}

fn trivial_sphere(boundary: &[Vector3<f64>]) -> Sphere {
    match boundary.len() {
        0 => Sphere::none(),
        1 => Sphere {
            center: boundary[0],
            radius: 0.0,
        },
        2 => sphere_from_2(&boundary[0], &boundary[1]),
        3 => sphere_from_3(&boundary[0], &boundary[1], &boundary[2]),
        _ => sphere_from_4(&boundary[0], &boundary[1], &boundary[2], &boundary[3]),
    }
}

fn sphere_from_2(a: &Vector3<f64>, b: &Vector3<f64>) -> Sphere {
    let center = (a + b) / 2.0;
    Sphere {
        center,
        radius: (a - center).norm(),
    }
}

/// Smallest sphere through three points: circumcircle of the triangle,
/// center in its plane. Falls back to the farthest-pair diameter when the
/// points are (near) collinear.
fn sphere_from_3(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Sphere {
    let ab = b - a;
    let ac = c - a;
    let aa = ab.norm_squared();
    let cc = ac.norm_squared();
    let bc = ab.dot(&ac);
    let det = aa * cc - bc * bc;
    if det.abs() <= 1e-14 * aa.max(cc).max(1e-300).powi(2).sqrt() * aa.max(cc).max(1.0) {
        let mut best = sphere_from_2(a, b);
        for (p, q) in [(a, c), (b, c)] {
            let s = sphere_from_2(p, q);
            if s.radius > best.radius {
                best = s;
            }
        }
        return best;
    }
    let alpha = (cc * aa / 2.0 - bc * cc / 2.0) / det;
    let beta = (aa * cc / 2.0 - bc * aa / 2.0) / det;
    let center = a + ab * alpha + ac * beta;
    Sphere {
        center,
        radius: (a - center).norm(),
    }
}

/// Circumsphere of four points; coplanar inputs fall back to the smallest
/// three-point sphere that encloses all four.
fn sphere_from_4(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> Sphere {
    let rows = [b - a, c - a, d - a];
    let m = nalgebra::Matrix3::from_rows(&[
        rows[0].transpose(),
        rows[1].transpose(),
        rows[2].transpose(),
    ]);
    let rhs = Vector3::new(
        rows[0].norm_squared() / 2.0,
        rows[1].norm_squared() / 2.0,
        rows[2].norm_squared() / 2.0,
    );
    if let Some(inv) = m.try_inverse() {
        let offset = inv * rhs;
        if offset.iter().all(|v| v.is_finite()) {
            let center = a + offset;
            return Sphere {
                center,
                radius: (a - center).norm(),
            };
        }
    }
    // Coplanar: pick the smallest 3-point sphere covering all four.
    let pts = [*a, *b, *c, *d];
    let mut best: Option<Sphere> = None;
    for i in 0..4 {
        let keep: Vec<&Vector3<f64>> = (0..4).filter(|&k| k != i).map(|k| &pts[k]).collect();
        let s = sphere_from_3(keep[0], keep[1], keep[2]);
        if pts.iter().all(|p| s.contains(p)) && best.map_or(true, |b| s.radius < b.radius) {
            best = Some(s);
        }
    }
    best.unwrap_or_else(|| sphere_from_3(a, b, c))
}

// ---------------------------------------------------------------------------
// Basis point set
// ---------------------------------------------------------------------------

/// Fixed random points inside a sphere of the given radius; the encoding
/// basis shared by every object. Deterministic given the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisPointSet {
    pub offsets: Vec<Vector3<f64>>,
    pub radius: f64,
    pub seed: u64,
}

impl BasisPointSet {
    /// Rejection-samples `n` points uniformly inside the sphere.
    pub fn generate(n: usize, radius: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offsets = Vec::with_capacity(n);
        while offsets.len() < n {
            let p = Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ) * radius;
            if p.norm() <= radius {
                offsets.push(p);
            }
        }
        BasisPointSet {
            offsets,
            radius,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_json_pretty(path, self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// Result of BPS encoding: per basis point, the vector to the nearest
/// surface point and its index.
#[derive(Debug, Clone)]
pub struct BpsEncoding {
    pub directions: Vec<Vector3<f64>>,
    pub nearest_index: Vec<usize>,
}

impl BpsEncoding {
    /// The encoded surface points themselves: basis point + direction.
    pub fn surface_points(&self, basis: &BasisPointSet, center: &Vector3<f64>) -> Vec<Vector3<f64>> {
        self.directions
            .iter()
            .zip(&basis.offsets)
            .map(|(dir, off)| center + off + dir)
            .collect()
    }
}

/// Encodes directional vectors from each basis point (placed around `center`)
/// to its nearest surface point. Ties break to the lowest index.
pub fn bps_encode(
    surface_points: &[Vector3<f64>],
    basis: &BasisPointSet,
    center: &Vector3<f64>,
) -> Result<BpsEncoding> {
    if surface_points.is_empty() {
        return Err(Error::EmptyInput("bps_encode with no surface points".into()));
    }
    let mut directions = Vec::with_capacity(basis.len());
    let mut nearest_index = Vec::with_capacity(basis.len());
    for off in &basis.offsets {
        let b = center + off;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, p) in surface_points.iter().enumerate() {
            let d = (p - b).norm_squared();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        directions.push(surface_points[best] - b);
        nearest_index.push(best);
    }
    Ok(BpsEncoding {
        directions,
        nearest_index,
    })
}

// ---------------------------------------------------------------------------
// Closest point / signed distance
// ---------------------------------------------------------------------------

/// Closest point on a triangle to `p` (vertex / edge / face cases).
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = va + vb + vc;
    if denom.abs() < 1e-300 {
        // Degenerate face: fall back to the nearest of its corners.
        let da = (p - a).norm_squared();
        let db = (p - b).norm_squared();
        let dc = (p - c).norm_squared();
        if da <= db && da <= dc {
            return *a;
        }
        if db <= dc {
            return *b;
        }
        return *c;
    }
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

/// Exact closest point on the mesh surface over all triangles.
pub fn point_to_mesh(p: &Vector3<f64>, mesh: &TriMesh) -> Result<(f64, Vector3<f64>)> {
    if mesh.faces.is_empty() {
        return Err(Error::EmptyInput("point_to_mesh on empty mesh".into()));
    }
    let mut best_d2 = f64::INFINITY;
    let mut best = Vector3::zeros();
    for f in &mesh.faces {
        let q = closest_point_on_triangle(
            p,
            &mesh.vertices[f[0]],
            &mesh.vertices[f[1]],
            &mesh.vertices[f[2]],
        );
        let d2 = (p - q).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            best = q;
        }
    }
    Ok((best_d2.sqrt(), best))
}

/// Generalized winding number of the mesh around `p` (1 deep inside a closed
/// mesh, 0 outside), via the van Oosterom-Strackee solid angle formula.
pub fn winding_number(p: &Vector3<f64>, mesh: &TriMesh) -> f64 {
    let mut total = 0.0;
    for f in &mesh.faces {
        let a = mesh.vertices[f[0]] - p;
        let b = mesh.vertices[f[1]] - p;
        let c = mesh.vertices[f[2]] - p;
        let la = a.norm();
        let lb = b.norm();
        let lc = c.norm();
        let det = a.dot(&b.cross(&c));
        let denom = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
        total += 2.0 * det.atan2(denom);
    }
    total / (4.0 * std::f64::consts::PI)
}

/// True when the winding number marks `p` as interior.
pub fn is_inside(p: &Vector3<f64>, mesh: &TriMesh) -> bool {
    winding_number(p, mesh) > 0.5
}

/// Signed distance to the mesh surface, negative inside. The sign comes from
/// the generalized winding number; it is unreliable on non-watertight input
/// (checked by the callers that need it, see [`intersection_volume`]).
pub fn signed_distance(p: &Vector3<f64>, mesh: &TriMesh) -> Result<f64> {
    let (d, _) = point_to_mesh(p, mesh)?;
    Ok(if is_inside(p, mesh) { -d } else { d })
}

// ---------------------------------------------------------------------------
// Voxelized intersection volume
// ---------------------------------------------------------------------------

/// Volume of the intersection of two closed meshes in cm^3, counting voxels
/// whose centers are interior to both. The grid is anchored at the joint
/// (combined) bounding box of the pair; only cells within the overlap of the
/// two boxes are visited. Warns on non-watertight input.
pub fn intersection_volume(a: &TriMesh, b: &TriMesh, voxel: f64) -> Result<f64> {
    if voxel <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "voxel size must be positive, got {voxel}"
        )));
    }
    for (mesh, name) in [(a, "first"), (b, "second")] {
        if !mesh.is_watertight() {
            log::warn!("intersection_volume: {name} mesh is not watertight; result unreliable");
        }
    }
    let (Some((lo_a, hi_a)), Some((lo_b, hi_b))) = (a.aabb(), b.aabb()) else {
        return Ok(0.0);
    };
    let joint_lo = lo_a.inf(&lo_b);
    let overlap_lo = lo_a.sup(&lo_b);
    let overlap_hi = hi_a.inf(&hi_b);
    if (0..3).any(|k| overlap_lo[k] >= overlap_hi[k]) {
        return Ok(0.0);
    }

    // Index range of cells (anchored at the joint box corner) covering the overlap.
    let mut start = [0usize; 3];
    let mut end = [0usize; 3];
    for k in 0..3 {
        start[k] = ((overlap_lo[k] - joint_lo[k]) / voxel).floor().max(0.0) as usize;
        end[k] = ((overlap_hi[k] - joint_lo[k]) / voxel).ceil() as usize;
    }

    let mut count: u64 = 0;
    for ix in start[0]..end[0] {
        let x = joint_lo.x + (ix as f64 + 0.5) * voxel;
        for iy in start[1]..end[1] {
            let y = joint_lo.y + (iy as f64 + 0.5) * voxel;
            for iz in start[2]..end[2] {
                let z = joint_lo.z + (iz as f64 + 0.5) * voxel;
                let p = Vector3::new(x, y, z);
                if is_inside(&p, a) && is_inside(&p, b) {
                    count += 1;
                }
            }
        }
    }
    Ok(count as f64 * voxel.powi(3) * 1e6)
}

// ---------------------------------------------------------------------------
// Sampled signed distance grid
// ---------------------------------------------------------------------------

/// Signed distance sampled on a regular node lattice, with trilinear
/// interpolation and analytic gradients. Used where many penetration
/// queries hit the same rigid mesh.
#[derive(Debug, Clone)]
pub struct SdfGrid {
    pub origin: Vector3<f64>,
    pub cell: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn build(mesh: &TriMesh, cell: f64, padding: f64) -> Result<SdfGrid> {
        let (lo, hi) = mesh
            .aabb()
            .ok_or_else(|| Error::EmptyInput("SdfGrid::build on empty mesh".into()))?;
        let origin = lo - Vector3::repeat(padding);
        let extent = hi + Vector3::repeat(padding) - origin;
        let dims = [
            (extent.x / cell).ceil() as usize + 1,
            (extent.y / cell).ceil() as usize + 1,
            (extent.z / cell).ceil() as usize + 1,
        ];
        let mut values = vec![0.0; dims[0] * dims[1] * dims[2]];
        for ix in 0..dims[0] {
            for iy in 0..dims[1] {
                for iz in 0..dims[2] {
                    let p = origin + Vector3::new(ix as f64, iy as f64, iz as f64) * cell;
                    values[(ix * dims[1] + iy) * dims[2] + iz] = signed_distance(&p, mesh)?;
                }
            }
        }
        Ok(SdfGrid {
            origin,
            cell,
            dims,
            values,
        })
    }

    fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[(ix * self.dims[1] + iy) * self.dims[2] + iz]
    }

    /// Trilinear sample and spatial gradient. Queries outside the grid are
    /// clamped to the border (which is positive given enough padding).
    pub fn sample_with_grad(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let u = ((p[k] - self.origin[k]) / self.cell).clamp(0.0, (self.dims[k] - 1) as f64);
            let i = (u.floor() as usize).min(self.dims[k] - 2);
            idx[k] = i;
            frac[k] = u - i as f64;
        }
        let (i, j, k) = (idx[0], idx[1], idx[2]);
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let c000 = self.at(i, j, k);
        let c100 = self.at(i + 1, j, k);
        let c010 = self.at(i, j + 1, k);
        let c110 = self.at(i + 1, j + 1, k);
        let c001 = self.at(i, j, k + 1);
        let c101 = self.at(i + 1, j, k + 1);
        let c011 = self.at(i, j + 1, k + 1);
        let c111 = self.at(i + 1, j + 1, k + 1);

        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        let value = c0 + (c1 - c0) * fz;

        let dx = ((c100 - c000) * (1.0 - fy) + (c110 - c010) * fy) * (1.0 - fz)
            + ((c101 - c001) * (1.0 - fy) + (c111 - c011) * fy) * fz;
        let dy = ((c010 - c000) * (1.0 - fx) + (c110 - c100) * fx) * (1.0 - fz)
            + ((c011 - c001) * (1.0 - fx) + (c111 - c101) * fx) * fz;
        let dz = ((c001 - c000) * (1.0 - fx) + (c101 - c100) * fx) * (1.0 - fy)
            + ((c011 - c010) * (1.0 - fx) + (c111 - c110) * fx) * fy;
        (value, Vector3::new(dx, dy, dz) / self.cell)
    }
}

// ---------------------------------------------------------------------------
// Signed distance field abstraction
// ---------------------------------------------------------------------------

/// A queryable signed distance (negative inside) with spatial gradient.
/// Penetration terms are generic over this: exact meshes for evaluation,
/// sampled grids for training throughput.
pub trait SignedDistanceField {
    fn signed_distance_grad(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>);
}

impl SignedDistanceField for SdfGrid {
    fn signed_distance_grad(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        self.sample_with_grad(p)
    }
}

impl SignedDistanceField for TriMesh {
    fn signed_distance_grad(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (dist, closest) = point_to_mesh(p, self).expect("non-empty mesh");
        let inside = is_inside(p, self);
        let dir = p - closest;
        let grad = if dist > 1e-12 {
            let unit = dir / dist;
            if inside {
                -unit
            } else {
                unit
            }
        } else {
            Vector3::zeros()
        };
        (if inside { -dist } else { dist }, grad)
    }
}

/// Sphere with an analytic signed distance; test fixture for gradient
/// checks where mesh SDF kinks would break finite differences.
#[derive(Debug, Clone)]
pub struct AnalyticSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl SignedDistanceField for AnalyticSphere {
    fn signed_distance_grad(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let d = p - self.center;
        let n = d.norm();
        if n < 1e-12 {
            (-self.radius, Vector3::zeros())
        } else {
            (n - self.radius, d / n)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn geodesic_single_triangle() {
        // Equilateral, unit edges.
        let mesh = TriMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.5, 3.0_f64.sqrt() / 2.0, 0.0),
            ],
            faces: vec![[0, 1, 2]],
        };
        let g = geodesic_matrix(&mesh).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 1.0 };
                assert_abs_diff_eq!(g[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn geodesic_unit_square_diagonal() {
        let mesh = TriMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        };
        let g = geodesic_matrix(&mesh).unwrap();
        assert_abs_diff_eq!(g[(1, 3)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(0, 2)], 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn geodesic_path_graph() {
        // Degenerate faces give a pure path edge graph of 3 unit edges.
        let mesh = TriMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(2.0, 0.0, 0.0),
                Vector3::new(3.0, 0.0, 0.0),
            ],
            faces: vec![[0, 1, 1], [1, 2, 2], [2, 3, 3]],
        };
        let g = geodesic_matrix(&mesh).unwrap();
        assert_abs_diff_eq!(g[(0, 3)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn geodesic_disconnected_errors() {
        let mesh = TriMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(5.0, 0.0, 0.0),
                Vector3::new(6.0, 0.0, 0.0),
                Vector3::new(5.0, 1.0, 0.0),
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        match geodesic_matrix(&mesh) {
            Err(Error::DisconnectedMesh { components, sizes }) => {
                assert_eq!(components, 2);
                assert_eq!(sizes, vec![3, 3]);
            }
            other => panic!("expected DisconnectedMesh, got {other:?}"),
        }
    }

    #[test]
    fn geodesic_dominates_euclidean() {
        let mesh = icosphere(0.1, Vector3::zeros(), 1);
        let g = geodesic_matrix(&mesh).unwrap();
        for i in 0..mesh.vertices.len() {
            for j in 0..mesh.vertices.len() {
                let euclid = (mesh.vertices[i] - mesh.vertices[j]).norm();
                assert!(g[(i, j)] >= euclid - 1e-9);
            }
        }
    }

    #[test]
    fn bounding_sphere_symmetric_pair() {
        let pts = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)];
        let (c, r) = min_bounding_sphere(&pts).unwrap();
        assert_abs_diff_eq!(c, Vector3::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bounding_sphere_single_point() {
        let p = Vector3::new(0.3, -0.2, 0.9);
        let (c, r) = min_bounding_sphere(&[p]).unwrap();
        assert_abs_diff_eq!(c, p, epsilon = 1e-15);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn bounding_sphere_empty_errors() {
        assert!(min_bounding_sphere(&[]).is_err());
    }

    #[test]
    fn bounding_sphere_encloses_and_is_tight() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let pts: Vec<Vector3<f64>> = (0..40)
                .map(|_| {
                    Vector3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    )
                })
                .collect();
            let (c, r) = min_bounding_sphere(&pts).unwrap();
            let max_d = pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
            assert!(max_d <= r + 1e-9, "point escapes sphere");
            // Tightness: some point must sit on the boundary.
            assert!(max_d >= r - 1e-9, "sphere radius {r} loose vs {max_d}");
        }
    }

    #[test]
    fn bps_coincident_point_gives_zero_direction() {
        let basis = BasisPointSet {
            offsets: vec![Vector3::zeros()],
            radius: 1.0,
            seed: 0,
        };
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0)];
        let enc = bps_encode(&pts, &basis, &Vector3::zeros()).unwrap();
        assert_abs_diff_eq!(enc.directions[0], Vector3::zeros(), epsilon = 1e-15);
        assert_eq!(enc.nearest_index[0], 0);
    }

    #[test]
    fn bps_nearest_of_two() {
        let basis = BasisPointSet {
            offsets: vec![Vector3::zeros()],
            radius: 1.0,
            seed: 0,
        };
        let pts = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.0)];
        let enc = bps_encode(&pts, &basis, &Vector3::zeros()).unwrap();
        assert_abs_diff_eq!(enc.directions[0], Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        assert_eq!(enc.nearest_index[0], 0);
    }

    #[test]
    fn bps_translation_equivariance() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let basis = BasisPointSet::generate(32, 0.2, 42);
        let pts: Vec<Vector3<f64>> = (0..50)
            .map(|_| {
                Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ) * 0.1
            })
            .collect();
        let center = Vector3::new(0.01, -0.02, 0.03);
        let t = Vector3::new(1.5, -2.0, 0.7);
        let moved: Vec<Vector3<f64>> = pts.iter().map(|p| p + t).collect();
        let enc_a = bps_encode(&pts, &basis, &center).unwrap();
        let enc_b = bps_encode(&moved, &basis, &(center + t)).unwrap();
        for (da, db) in enc_a.directions.iter().zip(&enc_b.directions) {
            assert_abs_diff_eq!(da, db, epsilon = 1e-12);
        }
        assert_eq!(enc_a.nearest_index, enc_b.nearest_index);
    }

    #[test]
    fn bps_deterministic_given_seed() {
        let a = BasisPointSet::generate(64, 0.3, 42);
        let b = BasisPointSet::generate(64, 0.3, 42);
        assert_eq!(a.offsets, b.offsets);
        assert!(a.offsets.iter().all(|p| p.norm() <= 0.3 + 1e-12));
    }

    #[test]
    fn point_to_mesh_on_face_and_above() {
        let tri = TriMesh {
            vertices: vec![
                Vector3::new(-1.0, -1.0, 0.0),
                Vector3::new(1.0, -1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            faces: vec![[0, 1, 2]],
        };
        let (d, q) = point_to_mesh(&Vector3::new(0.0, -0.5, 0.0), &tri).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q, Vector3::new(0.0, -0.5, 0.0), epsilon = 1e-12);

        let (d, q) = point_to_mesh(&Vector3::new(0.0, 0.0, 1.0), &tri).unwrap();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q, Vector3::new(0.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn point_to_mesh_matches_dense_sampling() {
        use rand::Rng;
        use rand::SeedableRng;
        let mesh = icosphere(0.5, Vector3::new(0.1, 0.0, -0.2), 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            let (d, _) = point_to_mesh(&p, &mesh).unwrap();
            // Dense barycentric sampling of every face as the oracle.
            let mut oracle = f64::INFINITY;
            let k = 12;
            for f in &mesh.faces {
                let (a, b, c) = (
                    mesh.vertices[f[0]],
                    mesh.vertices[f[1]],
                    mesh.vertices[f[2]],
                );
                for i in 0..=k {
                    for j in 0..=(k - i) {
                        let u = i as f64 / k as f64;
                        let v = j as f64 / k as f64;
                        let q = a * (1.0 - u - v) + b * u + c * v;
                        oracle = oracle.min((p - q).norm());
                    }
                }
            }
            assert!((d - oracle).abs() < 1e-3, "d={d} oracle={oracle}");
            assert!(d <= oracle + 1e-12);
        }
    }

    #[test]
    fn signed_distance_unit_cube_center() {
        let cube = box_mesh(Vector3::repeat(0.5), Vector3::zeros(), 1);
        assert!(cube.is_watertight());
        let d = signed_distance(&Vector3::zeros(), &cube).unwrap();
        assert_abs_diff_eq!(d, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn signed_distance_outside_sphere() {
        let sphere = icosphere(0.5, Vector3::zeros(), 3);
        let d = signed_distance(&Vector3::new(1.5, 0.0, 0.0), &sphere).unwrap();
        // Chordal mesh under-approximates the sphere slightly.
        assert!((d - 1.0).abs() < 5e-3, "d = {d}");
    }

    #[test]
    fn signed_distance_surface_vertex_zero() {
        let cube = box_mesh(Vector3::repeat(0.5), Vector3::zeros(), 1);
        let v = cube.vertices[0];
        let d = signed_distance(&v, &cube).unwrap();
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn intersection_volume_disjoint_and_identical() {
        let a = box_mesh(Vector3::repeat(0.05), Vector3::zeros(), 1);
        let b = box_mesh(Vector3::repeat(0.05), Vector3::new(1.0, 0.0, 0.0), 1);
        assert_eq!(intersection_volume(&a, &b, 0.005).unwrap(), 0.0);

        let c = box_mesh(Vector3::repeat(0.05), Vector3::zeros(), 1);
        let v = intersection_volume(&a, &c, 0.005).unwrap();
        let expect = 0.1f64.powi(3) * 1e6; // 1000 cm^3
        assert!((v - expect).abs() / expect < 0.02, "v = {v}");
    }

    #[test]
    fn intersection_volume_symmetric_and_monotone() {
        let a = box_mesh(Vector3::repeat(0.05), Vector3::zeros(), 1);
        let b = box_mesh(Vector3::repeat(0.05), Vector3::new(0.06, 0.0, 0.0), 1);
        let ab = intersection_volume(&a, &b, 0.005).unwrap();
        let ba = intersection_volume(&b, &a, 0.005).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-9);

        let bigger = box_mesh(
            Vector3::new(0.07, 0.05, 0.05),
            Vector3::new(0.06, 0.0, 0.0),
            1,
        );
        let ab2 = intersection_volume(&a, &bigger, 0.005).unwrap();
        assert!(ab2 >= ab);
    }

    #[test]
    fn sdf_grid_matches_exact_near_surface() {
        let cube = box_mesh(Vector3::repeat(0.05), Vector3::zeros(), 1);
        let grid = SdfGrid::build(&cube, 0.004, 0.02).unwrap();
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.random::<f64>() * 0.12 - 0.06,
                rng.random::<f64>() * 0.12 - 0.06,
                rng.random::<f64>() * 0.12 - 0.06,
            );
            let exact = signed_distance(&p, &cube).unwrap();
            let (approx, _) = grid.sample_with_grad(&p);
            assert!(
                (exact - approx).abs() < 0.004,
                "exact {exact} vs grid {approx}"
            );
        }
    }

    #[test]
    fn icosphere_watertight_and_on_radius() {
        let s = icosphere(0.25, Vector3::new(1.0, 2.0, 3.0), 2);
        assert!(s.is_watertight());
        for v in &s.vertices {
            assert_abs_diff_eq!((v - Vector3::new(1.0, 2.0, 3.0)).norm(), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn box_mesh_subdivided_watertight() {
        let b = box_mesh(Vector3::new(0.04, 0.03, 0.02), Vector3::zeros(), 4);
        assert!(b.is_watertight());
        // 6 faces * 2 * n^2 triangles
        assert_eq!(b.faces.len(), 6 * 2 * 16);
    }
}
