//! Grid splatting.
//!
//! Points push their kernel-weighted attributes onto the vertices of a regular
//! `R³` grid spanning `[0,1]³` (vertex `(i, j, l)` sits at `(i, j, l) / (R - 1)`).
//! A sort-based bin index pairs every point with the vertices inside its support
//! ball; the forward pass then reduces each vertex's contiguous pair range, and
//! the backward pass walks each point's vertex list. Both passes are
//! deterministic: every accumulator is owned by exactly one worker and sums in a
//! fixed order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{point_function, AttributeGradients, PointCloud, PointGradient, COVER_EPS};
use crate::Vec3;

/// Vertex/point incidence sorted by vertex id.
#[derive(Clone, Debug)]
pub struct BinIndex {
    resolution: usize,
    n_points: usize,
    /// `(vertex, point)` pairs sorted by vertex, then point.
    pairs: Vec<(u32, u32)>,
    /// `pairs[vertex_offsets[v]..vertex_offsets[v + 1]]` are the pairs of vertex `v`.
    vertex_offsets: Vec<usize>,
    /// Vertex ids of every point, point-major, ascending within a point.
    point_vertices: Vec<u32>,
    point_offsets: Vec<usize>,
}

impl BinIndex {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs whose vertex is `vertex`.
    pub fn vertex_pairs(&self, vertex: usize) -> &[(u32, u32)] {
        &self.pairs[self.vertex_offsets[vertex]..self.vertex_offsets[vertex + 1]]
    }

    /// Vertices inside the support of `point`.
    pub fn point_vertices(&self, point: usize) -> &[u32] {
        &self.point_vertices[self.point_offsets[point]..self.point_offsets[point + 1]]
    }
}

/// Accumulators and finalized fields on the grid vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrid {
    resolution: usize,
    feature_dim: usize,
    pub weight_sum: Vec<f64>,
    pub weighted_proj: Vec<f64>,
    /// Vertex-major, `feature_dim` values per vertex.
    pub weighted_feature: Vec<f64>,
    pub sdf: Vec<f64>,
    pub covered: Vec<bool>,
    background_sdf: Option<f64>,
}

/// Eight vertex ids and trilinear weights of the cell containing a query.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub vertices: [usize; 8],
    pub weights: [f64; 8],
}

impl SplatGrid {
    pub fn new(resolution: usize, feature_dim: usize) -> Result<Self> {
        check_resolution(resolution)?;
        let n = resolution.pow(3);
        Ok(Self {
            resolution,
            feature_dim,
            weight_sum: vec![0.0; n],
            weighted_proj: vec![0.0; n],
            weighted_feature: vec![0.0; n * feature_dim],
            sdf: vec![0.0; n],
            covered: vec![false; n],
            background_sdf: None,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_vertices(&self) -> usize {
        self.resolution.pow(3)
    }

    /// Grid spacing `1 / (R - 1)`.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.resolution - 1) as f64
    }

    pub fn is_finalized(&self) -> bool {
        self.background_sdf.is_some()
    }

    pub fn background_sdf(&self) -> Option<f64> {
        self.background_sdf
    }

    #[inline]
    pub fn vertex_id(&self, i: usize, j: usize, l: usize) -> usize {
        i + self.resolution * (j + self.resolution * l)
    }

    #[inline]
    pub fn vertex_coords(&self, id: usize) -> [usize; 3] {
        let r = self.resolution;
        [id % r, (id / r) % r, id / (r * r)]
    }

    #[inline]
    pub fn vertex_position(&self, id: usize) -> Vec3 {
        vertex_position(self.resolution, id)
    }

    /// Finalized texture at a vertex, or `None` if uncovered.
    pub fn vertex_feature(&self, id: usize) -> Option<Vec<f64>> {
        if !self.covered[id] {
            return None;
        }
        let w = self.weight_sum[id];
        let d = self.feature_dim;
        Some(self.weighted_feature[id * d..(id + 1) * d].iter().map(|c| c / w).collect())
    }

    /// Trilinear stencil of the cell containing `q` (clamped into the grid).
    pub fn stencil(&self, q: &Vec3) -> Stencil {
        let last = (self.resolution - 1) as f64;
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let g = (q[a].clamp(0.0, 1.0)) * last;
            let i = (g.floor() as usize).min(self.resolution - 2);
            base[a] = i;
            t[a] = g - i as f64;
        }
        let mut vertices = [0; 8];
        let mut weights = [0.0; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            vertices[c] = self.vertex_id(base[0] + dx, base[1] + dy, base[2] + dz);
            let wx = if dx == 1 { t[0] } else { 1.0 - t[0] };
            let wy = if dy == 1 { t[1] } else { 1.0 - t[1] };
            let wz = if dz == 1 { t[2] } else { 1.0 - t[2] };
            weights[c] = wx * wy * wz;
        }
        Stencil { vertices, weights }
    }

    /// Trilinear interpolation of the finalized SDF.
    pub fn sample_sdf(&self, q: &Vec3) -> f64 {
        let st = self.stencil(q);
        st.vertices.iter().zip(&st.weights).map(|(&v, w)| w * self.sdf[v]).sum()
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 2 {
        return Err(Error::invalid(format!("grid resolution must be >= 2, got {resolution}")));
    }
    if (resolution as u128).pow(3) > u32::MAX as u128 {
        return Err(Error::invalid(format!("grid resolution {resolution} is too large")));
    }
    Ok(())
}

#[inline]
pub fn vertex_position(resolution: usize, id: usize) -> Vec3 {
    let r = resolution;
    let h = 1.0 / (r - 1) as f64;
    Vec3::new((id % r) as f64 * h, ((id / r) % r) as f64 * h, (id / (r * r)) as f64 * h)
}

/// Default background distance: two grid spacings.
pub fn default_background_sdf(resolution: usize) -> f64 {
    2.0 / (resolution - 1) as f64
}

/// Pairs every point with the grid vertices inside its support ball.
pub fn bin_points(cloud: &PointCloud, resolution: usize) -> Result<BinIndex> {
    check_resolution(resolution)?;
    if cloud.len() > u32::MAX as usize {
        return Err(Error::invalid("too many points"));
    }
    let last = (resolution - 1) as f64;
    let per_point: Vec<Vec<u32>> = cloud
        .points
        .par_iter()
        .map(|point| {
            let support = point.kernel.support_radius_sq();
            let radius = support.sqrt();
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            for a in 0..3 {
                // One extra vertex of slack; the exact sphere test below decides.
                let l = ((point.position[a] - radius) * last).floor() - 1.0;
                let h = ((point.position[a] + radius) * last).ceil() + 1.0;
                lo[a] = l.clamp(0.0, last) as usize;
                hi[a] = h.clamp(0.0, last) as usize;
            }
            let mut ids = Vec::new();
            for l in lo[2]..=hi[2] {
                for j in lo[1]..=hi[1] {
                    for i in lo[0]..=hi[0] {
                        let id = i + resolution * (j + resolution * l);
                        let s = (vertex_position(resolution, id) - point.position).norm_squared();
                        if s <= support {
                            ids.push(id as u32);
                        }
                    }
                }
            }
            ids
        })
        .collect();

    let mut point_offsets = Vec::with_capacity(cloud.len() + 1);
    point_offsets.push(0);
    let mut total = 0;
    for ids in &per_point {
        total += ids.len();
        point_offsets.push(total);
    }
    let mut point_vertices = Vec::with_capacity(total);
    let mut pairs = Vec::with_capacity(total);
    for (p, ids) in per_point.into_iter().enumerate() {
        pairs.extend(ids.iter().map(|&v| (v, p as u32)));
        point_vertices.extend(ids);
    }
    pairs.par_sort_unstable();

    let n_vertices = resolution.pow(3);
    let mut vertex_offsets = vec![0usize; n_vertices + 1];
    for &(v, _) in &pairs {
        vertex_offsets[v as usize + 1] += 1;
    }
    for v in 0..n_vertices {
        vertex_offsets[v + 1] += vertex_offsets[v];
    }

    Ok(BinIndex {
        resolution,
        n_points: cloud.len(),
        pairs,
        vertex_offsets,
        point_vertices,
        point_offsets,
    })
}

fn check_compatible(cloud: &PointCloud, index: &BinIndex, grid: &SplatGrid) -> Result<()> {
    if index.resolution != grid.resolution {
        return Err(Error::invalid(format!(
            "bin index resolution {} does not match grid resolution {}",
            index.resolution, grid.resolution
        )));
    }
    if index.n_points != cloud.len() {
        return Err(Error::invalid(format!(
            "bin index was built for {} points, cloud has {}",
            index.n_points,
            cloud.len()
        )));
    }
    if grid.feature_dim != cloud.feature_dim {
        return Err(Error::invalid("grid and cloud feature dimensions differ"));
    }
    Ok(())
}

/// Accumulates weights, weighted plane distances and weighted features.
/// Resets the grid's previous contents.
pub fn splat_forward(cloud: &PointCloud, index: &BinIndex, grid: &mut SplatGrid) -> Result<()> {
    check_compatible(cloud, index, grid)?;
    let kind = cloud.kernel;
    let d = cloud.feature_dim;
    let n = grid.n_vertices();

    let sums: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|v| {
            let q = vertex_position(index.resolution, v);
            let mut w_sum = 0.0;
            let mut proj = 0.0;
            for &(_, p) in index.vertex_pairs(v) {
                let point = &cloud.points[p as usize];
                let s = (q - point.position).norm_squared();
                let w = kind.weight(s, &point.kernel);
                w_sum += w;
                proj += w * point_function(&q, point);
            }
            (w_sum, proj)
        })
        .collect();
    for (v, (w, p)) in sums.into_iter().enumerate() {
        grid.weight_sum[v] = w;
        grid.weighted_proj[v] = p;
    }

    if d > 0 {
        grid.weighted_feature
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(v, acc)| {
                acc.fill(0.0);
                let q = vertex_position(index.resolution, v);
                for &(_, p) in index.vertex_pairs(v) {
                    let point = &cloud.points[p as usize];
                    let s = (q - point.position).norm_squared();
                    let w = kind.weight(s, &point.kernel);
                    for (a, c) in acc.iter_mut().zip(&point.feature) {
                        *a += w * c;
                    }
                }
            });
    }
    grid.background_sdf = None;
    Ok(())
}

/// Divides out the weights at covered vertices and assigns the constant
/// `background_sdf` everywhere else.
pub fn finalize(grid: &mut SplatGrid, background_sdf: f64) -> Result<()> {
    if !(background_sdf.is_finite() && background_sdf > 0.0) {
        return Err(Error::invalid(format!(
            "background sdf must be positive, got {background_sdf}"
        )));
    }
    for v in 0..grid.n_vertices() {
        let covered = grid.weight_sum[v] >= COVER_EPS;
        grid.covered[v] = covered;
        grid.sdf[v] = if covered {
            grid.weighted_proj[v] / grid.weight_sum[v]
        } else {
            background_sdf
        };
    }
    grid.background_sdf = Some(background_sdf);
    Ok(())
}

/// Bins, splats and finalizes in one go.
pub fn build_grid(cloud: &PointCloud, resolution: usize, background_sdf: f64) -> Result<(BinIndex, SplatGrid)> {
    let index = bin_points(cloud, resolution)?;
    let mut grid = SplatGrid::new(resolution, cloud.feature_dim)?;
    splat_forward(cloud, &index, &mut grid)?;
    finalize(&mut grid, background_sdf)?;
    Ok((index, grid))
}

fn check_backward(cloud: &PointCloud, index: &BinIndex, grid: &SplatGrid, len: usize, per_vertex: usize) -> Result<()> {
    check_compatible(cloud, index, grid)?;
    if !grid.is_finalized() {
        return Err(Error::invalid("grid must be finalized before the backward pass"));
    }
    if len != grid.n_vertices() * per_vertex {
        return Err(Error::invalid(format!(
            "expected {} vertex gradients, got {len}",
            grid.n_vertices() * per_vertex
        )));
    }
    Ok(())
}

/// Pulls `dL/dsdf[v]` back to every point attribute. Uncovered vertices hold the
/// constant background value and contribute nothing.
pub fn splat_backward(
    cloud: &PointCloud,
    index: &BinIndex,
    grid: &SplatGrid,
    vertex_grads: &[f64],
) -> Result<AttributeGradients> {
    check_backward(cloud, index, grid, vertex_grads.len(), 1)?;
    let kind = cloud.kernel;
    let d = cloud.feature_dim;
    let points = (0..cloud.len())
        .into_par_iter()
        .map(|p| {
            let point = &cloud.points[p];
            let mut grad = PointGradient::zeros(d);
            for &v in index.point_vertices(p) {
                let v = v as usize;
                let upstream = vertex_grads[v];
                if upstream == 0.0 || !grid.covered[v] {
                    continue;
                }
                let q = vertex_position(index.resolution, v);
                let offset = q - point.position;
                let e = kind.eval_with_grads(offset.norm_squared(), &point.kernel);
                let w_sum = grid.weight_sum[v];
                let w = e.value / w_sum;
                let residual = (offset.dot(&point.normal) - grid.sdf[v]) / w_sum * upstream;
                grad.normal += offset * (w * upstream);
                grad.position += point.normal * (-w * upstream) + offset * (-2.0 * e.d_s * residual);
                grad.k += e.d_k * residual;
                grad.m += e.d_m * residual;
            }
            grad
        })
        .collect();
    Ok(AttributeGradients { points })
}

/// Pulls `dL/dC[v]` (vertex-major, `feature_dim` per vertex) back to every
/// point attribute through the finalized texture field.
pub fn splat_backward_texture(
    cloud: &PointCloud,
    index: &BinIndex,
    grid: &SplatGrid,
    feature_grads: &[f64],
) -> Result<AttributeGradients> {
    let d = cloud.feature_dim;
    check_backward(cloud, index, grid, feature_grads.len(), d)?;
    let kind = cloud.kernel;
    let points = (0..cloud.len())
        .into_par_iter()
        .map(|p| {
            let point = &cloud.points[p];
            let mut grad = PointGradient::zeros(d);
            if d == 0 {
                return grad;
            }
            for &v in index.point_vertices(p) {
                let v = v as usize;
                let upstream = &feature_grads[v * d..(v + 1) * d];
                if !grid.covered[v] || upstream.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let q = vertex_position(index.resolution, v);
                let offset = q - point.position;
                let e = kind.eval_with_grads(offset.norm_squared(), &point.kernel);
                let w_sum = grid.weight_sum[v];
                let blended = &grid.weighted_feature[v * d..(v + 1) * d];
                let projected: f64 = point
                    .feature
                    .iter()
                    .zip(blended)
                    .zip(upstream)
                    .map(|((c, acc), g)| g * (c - acc / w_sum))
                    .sum();
                let residual = projected / w_sum;
                for (gc, g) in grad.feature.iter_mut().zip(upstream) {
                    *gc += e.value / w_sum * g;
                }
                grad.position += offset * (-2.0 * e.d_s * residual);
                grad.k += e.d_k * residual;
                grad.m += e.d_m * residual;
            }
            grad
        })
        .collect();
    Ok(AttributeGradients { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::OrientedPoint;
    use crate::kernel::{KernelKind, KernelParams};

    fn point_with_radius(p: [f64; 3], radius: f64) -> OrientedPoint {
        // m = 1, so the support radius is sqrt(k).
        OrientedPoint::new(
            Vec3::from(p),
            Vec3::z(),
            KernelParams::new(radius * radius, 1.0).unwrap(),
            vec![],
        )
        .unwrap()
    }

    fn cloud(points: Vec<OrientedPoint>) -> PointCloud {
        PointCloud::new(points, KernelKind::Compact).unwrap()
    }

    #[test]
    fn center_point_reaches_no_corner() {
        // Corners sit sqrt(3)/2 ≈ 0.866 from the center, beyond radius 0.6.
        let c = cloud(vec![point_with_radius([0.5, 0.5, 0.5], 0.6)]);
        assert_eq!(bin_points(&c, 2).unwrap().len(), 0);
    }

    #[test]
    fn corner_point_pairs_with_its_vertex_only() {
        let c = cloud(vec![point_with_radius([0.0, 0.0, 0.0], 0.1)]);
        let index = bin_points(&c, 2).unwrap();
        assert_eq!(index.pairs(), &[(0, 0)]);
        assert_eq!(index.vertex_pairs(0).len(), 1);
        assert_eq!(index.point_vertices(0), &[0]);
    }

    #[test]
    fn empty_cloud_gives_empty_index_and_uncovered_grid() {
        let c = cloud(vec![]);
        let (index, grid) = build_grid(&c, 4, 0.5).unwrap();
        assert!(index.is_empty());
        assert!(grid.weight_sum.iter().all(|&w| w == 0.0));
        assert!(grid.covered.iter().all(|&c| !c));
        assert!(grid.sdf.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn low_resolution_rejected() {
        let c = cloud(vec![]);
        assert!(bin_points(&c, 1).is_err());
        assert!(SplatGrid::new(0, 0).is_err());
    }

    #[test]
    fn single_point_single_vertex() {
        let c = cloud(vec![point_with_radius([0.02, 0.0, 0.03], 0.1)]);
        let (_, grid) = build_grid(&c, 3, 1.0).unwrap();
        assert!(grid.covered[0]);
        assert_eq!(grid.covered.iter().filter(|&&c| c).count(), 1);
        assert!((grid.sdf[0] - -0.03).abs() < 1e-15);
    }

    #[test]
    fn background_only_touches_uncovered_vertices() {
        let c = cloud(vec![point_with_radius([0.5, 0.5, 0.5], 0.3)]);
        let (_, mut a) = build_grid(&c, 8, 0.1).unwrap();
        let b = a.clone();
        finalize(&mut a, 7.0).unwrap();
        for v in 0..a.n_vertices() {
            if a.covered[v] {
                assert_eq!(a.sdf[v], b.sdf[v]);
            } else {
                assert_eq!(a.sdf[v], 7.0);
            }
        }
        assert!(finalize(&mut a, 0.0).is_err());
    }

    #[test]
    fn mismatched_index_rejected() {
        let c = cloud(vec![point_with_radius([0.5, 0.5, 0.5], 0.3)]);
        let (index, grid) = build_grid(&c, 8, 0.1).unwrap();
        let other = SplatGrid::new(9, 0).unwrap();
        assert!(splat_forward(&c, &index, &mut other.clone()).is_err());
        assert!(splat_backward(&c, &index, &other, &vec![0.0; 729]).is_err());
        assert!(splat_backward(&c, &index, &grid, &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let c = cloud(vec![
            point_with_radius([0.5, 0.5, 0.5], 0.3),
            point_with_radius([0.6, 0.4, 0.5], 0.2),
        ]);
        let (index, grid) = build_grid(&c, 8, 0.1).unwrap();
        let g = splat_backward(&c, &index, &grid, &vec![0.0; grid.n_vertices()]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn stencil_weights_sum_to_one_and_hit_vertices() {
        let grid = SplatGrid::new(5, 0).unwrap();
        let st = grid.stencil(&Vec3::new(0.3, 0.77, 1.0));
        assert!((st.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let at_vertex = grid.stencil(&grid.vertex_position(grid.vertex_id(1, 2, 3)));
        let hit: Vec<_> = at_vertex
            .vertices
            .iter()
            .zip(&at_vertex.weights)
            .filter(|(_, &w)| w > 0.0)
            .collect();
        assert_eq!(hit.len(), 1);
        assert_eq!(*hit[0].0, grid.vertex_id(1, 2, 3));
    }
}
