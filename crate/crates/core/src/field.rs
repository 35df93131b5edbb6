//! Brute-force implicit moving least squares fields.
//!
//! The signed distance at `q` is the kernel-weighted mean of per-point plane
//! distances `(q - p_i) · n_i`; the texture field blends per-point features with
//! the same weights. Every evaluation visits every point, so this module is
//! O(N) per query and doubles as the reference that [`crate::splat`] is checked
//! against.

use crate::error::{Error, Result};
use crate::kernel::{KernelKind, KernelParams};
use crate::Vec3;

/// Weight sums below this mark a query as uncovered.
pub const COVER_EPS: f64 = 1e-12;

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct OrientedPoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub kernel: KernelParams,
    pub feature: Vec<f64>,
}

impl OrientedPoint {
    /// Builds a point, normalizing `normal`. Fails on a zero or non-finite normal
    /// or a position outside the unit cube.
    pub fn new(position: Vec3, normal: Vec3, kernel: KernelParams, feature: Vec<f64>) -> Result<Self> {
        let norm = normal.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::invalid("normal must be a finite non-zero vector"));
        }
        let point = Self {
            position,
            normal: normal / norm,
            kernel,
            feature,
        };
        point.check()?;
        Ok(point)
    }

    fn check(&self) -> Result<()> {
        if !self.position.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!(
                "point position {:?} lies outside [0,1]^3",
                self.position.as_slice()
            )));
        }
        if (self.normal.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid("point normal is not unit length"));
        }
        if self.feature.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("point feature has non-finite entries"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<OrientedPoint>,
    pub feature_dim: usize,
    pub kernel: KernelKind,
}

impl PointCloud {
    pub fn new(points: Vec<OrientedPoint>, kernel: KernelKind) -> Result<Self> {
        let feature_dim = points.first().map_or(0, |p| p.feature.len());
        let cloud = Self {
            points,
            feature_dim,
            kernel,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_kernel(mut self, kernel: KernelKind) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (i, point) in self.points.iter().enumerate() {
            if point.feature.len() != self.feature_dim {
                return Err(Error::invalid(format!(
                    "point {i} has feature dimension {}, expected {}",
                    point.feature.len(),
                    self.feature_dim
                )));
            }
            point.check().map_err(|e| Error::invalid(format!("point {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Gradient slots for one point's trainable attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGradient {
    pub position: Vec3,
    pub normal: Vec3,
    pub k: f64,
    pub m: f64,
    pub feature: Vec<f64>,
}

impl PointGradient {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            position: Vec3::zeros(),
            normal: Vec3::zeros(),
            k: 0.0,
            m: 0.0,
            feature: vec![0.0; feature_dim],
        }
    }

    pub fn add_assign(&mut self, other: &PointGradient) {
        self.position += other.position;
        self.normal += other.normal;
        self.k += other.k;
        self.m += other.m;
        for (a, b) in self.feature.iter_mut().zip(&other.feature) {
            *a += b;
        }
    }

    /// Scalars in the fixed order `p.xyz, n.xyz, k, m, c...`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(8 + self.feature.len());
        out.extend(self.position.iter());
        out.extend(self.normal.iter());
        out.push(self.k);
        out.push(self.m);
        out.extend(&self.feature);
        out
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeGradients {
    pub points: Vec<PointGradient>,
}

impl AttributeGradients {
    pub fn zeros(n_points: usize, feature_dim: usize) -> Self {
        Self {
            points: vec![PointGradient::zeros(feature_dim); n_points],
        }
    }

    pub fn add_assign(&mut self, other: &AttributeGradients) {
        for (a, b) in self.points.iter_mut().zip(&other.points) {
            a.add_assign(b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.points.iter().all(PointGradient::is_zero)
    }
}

/// Signed distance from `query` to the tangent plane of `point`.
#[inline]
pub fn point_function(query: &Vec3, point: &OrientedPoint) -> f64 {
    (query - point.position).dot(&point.normal)
}

#[inline]
fn weight(kind: KernelKind, query: &Vec3, point: &OrientedPoint) -> Option<(f64, f64)> {
    let s = (query - point.position).norm_squared();
    if s > point.kernel.support_radius_sq() {
        return None;
    }
    Some((s, kind.weight(s, &point.kernel)))
}

/// Signed distance at `query`, or `None` when no point covers it.
pub fn eval_sdf(query: &Vec3, cloud: &PointCloud) -> Option<f64> {
    let mut weight_sum = 0.0;
    let mut weighted = 0.0;
    for point in &cloud.points {
        if let Some((_, w)) = weight(cloud.kernel, query, point) {
            weight_sum += w;
            weighted += w * point_function(query, point);
        }
    }
    (weight_sum >= COVER_EPS).then(|| weighted / weight_sum)
}

/// Blended feature at `query`, or `None` when no point covers it.
pub fn eval_texture(query: &Vec3, cloud: &PointCloud) -> Option<Vec<f64>> {
    let mut weight_sum = 0.0;
    let mut weighted = vec![0.0; cloud.feature_dim];
    for point in &cloud.points {
        if let Some((_, w)) = weight(cloud.kernel, query, point) {
            weight_sum += w;
            for (acc, c) in weighted.iter_mut().zip(&point.feature) {
                *acc += w * c;
            }
        }
    }
    if weight_sum < COVER_EPS {
        return None;
    }
    Some(weighted.into_iter().map(|v| v / weight_sum).collect())
}

/// Normalized blending weights `γ_i / Σγ` at `query`.
pub fn blend_weights(query: &Vec3, cloud: &PointCloud) -> Option<Vec<f64>> {
    let raw: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| weight(cloud.kernel, query, p).map_or(0.0, |(_, w)| w))
        .collect();
    let total: f64 = raw.iter().sum();
    (total >= COVER_EPS).then(|| raw.into_iter().map(|w| w / total).collect())
}

/// Field value at `query` together with `upstream · dF/dθ` for every point
/// attribute `θ`.
pub fn eval_sdf_with_grads(
    query: &Vec3,
    cloud: &PointCloud,
    upstream: f64,
) -> Result<(f64, AttributeGradients)> {
    let value = eval_sdf(query, cloud).ok_or(Error::Uncovered)?;
    let weight_sum: f64 = cloud
        .points
        .iter()
        .filter_map(|p| weight(cloud.kernel, query, p).map(|(_, w)| w))
        .sum();

    let mut grads = AttributeGradients::zeros(cloud.len(), cloud.feature_dim);
    for (point, grad) in cloud.points.iter().zip(grads.points.iter_mut()) {
        let offset = query - point.position;
        let s = offset.norm_squared();
        if s > point.kernel.support_radius_sq() {
            continue;
        }
        let e = cloud.kernel.eval_with_grads(s, &point.kernel);
        let w = e.value / weight_sum;
        let residual = (point_function(query, point) - value) / weight_sum;
        grad.normal = offset * (w * upstream);
        grad.position = (-point.normal * w + offset * (-2.0 * e.d_s * residual)) * upstream;
        grad.k = e.d_k * residual * upstream;
        grad.m = e.d_m * residual * upstream;
    }
    Ok((value, grads))
}

/// Texture value at `query` together with the gradient of `upstream · C(query)`.
pub fn eval_texture_with_grads(
    query: &Vec3,
    cloud: &PointCloud,
    upstream: &[f64],
) -> Result<(Vec<f64>, AttributeGradients)> {
    if upstream.len() != cloud.feature_dim {
        return Err(Error::invalid("upstream length differs from feature dimension"));
    }
    let value = eval_texture(query, cloud).ok_or(Error::Uncovered)?;
    let weight_sum: f64 = cloud
        .points
        .iter()
        .filter_map(|p| weight(cloud.kernel, query, p).map(|(_, w)| w))
        .sum();

    let mut grads = AttributeGradients::zeros(cloud.len(), cloud.feature_dim);
    for (point, grad) in cloud.points.iter().zip(grads.points.iter_mut()) {
        let offset = query - point.position;
        let s = offset.norm_squared();
        if s > point.kernel.support_radius_sq() {
            continue;
        }
        let e = cloud.kernel.eval_with_grads(s, &point.kernel);
        let w = e.value / weight_sum;
        let projected: f64 = point
            .feature
            .iter()
            .zip(&value)
            .zip(upstream)
            .map(|((c, v), g)| g * (c - v))
            .sum();
        let residual = projected / weight_sum;
        for (gc, g) in grad.feature.iter_mut().zip(upstream) {
            *gc = w * g;
        }
        grad.position = offset * (-2.0 * e.d_s * residual);
        grad.k = e.d_k * residual;
        grad.m = e.d_m * residual;
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(k: f64, m: f64) -> KernelParams {
        KernelParams::new(k, m).unwrap()
    }

    fn pt(p: [f64; 3], n: [f64; 3], k: f64, m: f64) -> OrientedPoint {
        OrientedPoint::new(Vec3::from(p), Vec3::from(n), params(k, m), vec![]).unwrap()
    }

    fn cloud(points: Vec<OrientedPoint>) -> PointCloud {
        PointCloud::new(points, KernelKind::Compact).unwrap()
    }

    #[test]
    fn point_function_examples() {
        let p = pt([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 1.0, 1.0);
        assert_eq!(point_function(&Vec3::new(0.0, 0.0, 1.0), &p), 1.0);
        assert_eq!(point_function(&p.position.clone(), &p), 0.0);
        assert_eq!(point_function(&Vec3::new(1.0, 0.0, 0.0), &p), 0.0);
    }

    #[test]
    fn single_point_sdf() {
        let c = cloud(vec![pt([0.5, 0.5, 0.5], [0.0, 0.0, 1.0], 0.1, 2.0)]);
        let v = eval_sdf(&Vec3::new(0.5, 0.5, 0.7), &c).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair_sdf() {
        let c = cloud(vec![
            pt([0.4, 0.5, 0.5], [0.0, 0.0, 1.0], 0.1, 2.0),
            pt([0.6, 0.5, 0.5], [0.0, 0.0, 1.0], 0.1, 2.0),
        ]);
        let v = eval_sdf(&Vec3::new(0.5, 0.5, 0.6), &c).unwrap();
        assert!((v - 0.1).abs() < 1e-15);
    }

    #[test]
    fn far_query_is_uncovered() {
        let c = cloud(vec![pt([0.1, 0.1, 0.1], [0.0, 0.0, 1.0], 0.01, 1.0)]);
        assert!(eval_sdf(&Vec3::new(0.9, 0.9, 0.9), &c).is_none());
        assert!(matches!(
            eval_sdf_with_grads(&Vec3::new(0.9, 0.9, 0.9), &c, 1.0),
            Err(Error::Uncovered)
        ));
    }

    #[test]
    fn texture_examples() {
        let mut a = pt([0.4, 0.5, 0.5], [0.0, 0.0, 1.0], 0.1, 2.0);
        let mut b = pt([0.6, 0.5, 0.5], [0.0, 0.0, 1.0], 0.1, 2.0);
        a.feature = vec![1.0, 0.0];
        b.feature = vec![0.0, 3.0];
        let c = cloud(vec![a.clone(), b]);
        let t = eval_texture(&Vec3::new(0.5, 0.5, 0.6), &c).unwrap();
        assert!((t[0] - 0.5).abs() < 1e-15 && (t[1] - 1.5).abs() < 1e-15);

        let single = cloud(vec![a]);
        assert_eq!(eval_texture(&Vec3::new(0.45, 0.5, 0.55), &single).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn single_point_gradients() {
        let c = cloud(vec![pt([0.5, 0.5, 0.5], [0.0, 0.6, 0.8], 0.05, 2.0)]);
        let q = Vec3::new(0.55, 0.45, 0.6);
        let (_, g) = eval_sdf_with_grads(&q, &c, 1.0).unwrap();
        let g = &g.points[0];
        assert!((g.normal - (q - c.points[0].position)).norm() < 1e-15);
        assert!((g.position + c.points[0].normal).norm() < 1e-12);
        assert!(g.k.abs() < 1e-12 && g.m.abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let c = cloud(vec![
            pt([0.5, 0.5, 0.5], [0.0, 0.0, 1.0], 0.05, 2.0),
            pt([0.52, 0.5, 0.5], [0.0, 1.0, 0.0], 0.05, 3.0),
        ]);
        let (_, g) = eval_sdf_with_grads(&Vec3::new(0.51, 0.52, 0.49), &c, 0.0).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn partition_of_unity_and_hull_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [KernelKind::Compact, KernelKind::Exponential] {
            for _ in 0..50 {
                let points = (0..8)
                    .map(|_| {
                        let p = [
                            rng.random_range(0.4..0.6),
                            rng.random_range(0.4..0.6),
                            rng.random_range(0.4..0.6),
                        ];
                        let n = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0];
                        pt(p, n, rng.random_range(0.01..0.05), rng.random_range(1.0..4.0))
                    })
                    .collect();
                let c = PointCloud::new(points, kind).unwrap();
                let q = Vec3::new(
                    rng.random_range(0.4..0.6),
                    rng.random_range(0.4..0.6),
                    rng.random_range(0.4..0.6),
                );
                let Some(w) = blend_weights(&q, &c) else { continue };
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                let v = eval_sdf(&q, &c).unwrap();
                let covering: Vec<f64> = c
                    .points
                    .iter()
                    .zip(&w)
                    .filter(|(_, &wi)| wi > 0.0)
                    .map(|(p, _)| point_function(&q, p))
                    .collect();
                let lo = covering.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = covering.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn plane_reproduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Vec3::new(0.3, -0.2, 0.9).normalize();
        let origin = Vec3::new(0.5, 0.5, 0.5);
        let u = normal.cross(&Vec3::x()).normalize();
        let v = normal.cross(&u);
        for kind in [KernelKind::Compact, KernelKind::Exponential] {
            let points = (0..40)
                .map(|_| {
                    let p = origin + u * rng.random_range(-0.2..0.2) + v * rng.random_range(-0.2..0.2);
                    OrientedPoint::new(
                        p,
                        normal,
                        params(rng.random_range(0.005..0.02), rng.random_range(1.0..3.0)),
                        vec![],
                    )
                    .unwrap()
                })
                .collect();
            let c = PointCloud::new(points, kind).unwrap();
            for _ in 0..200 {
                let q = origin
                    + u * rng.random_range(-0.2..0.2)
                    + v * rng.random_range(-0.2..0.2)
                    + normal * rng.random_range(-0.1..0.1);
                if let Some(f) = eval_sdf(&q, &c) {
                    assert!((f - (q - origin).dot(&normal)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mismatched_feature_dims_rejected() {
        let mut a = pt([0.4, 0.5, 0.5], [0.0, 0.0, 1.0], 0.1, 2.0);
        let b = pt([0.6, 0.5, 0.5], [0.0, 0.0, 1.0], 0.1, 2.0);
        a.feature = vec![1.0];
        assert!(PointCloud::new(vec![a, b], KernelKind::Compact).is_err());
    }

    #[test]
    fn out_of_domain_point_rejected() {
        assert!(OrientedPoint::new(Vec3::new(1.2, 0.0, 0.0), Vec3::z(), params(0.1, 1.0), vec![]).is_err());
        assert!(OrientedPoint::new(Vec3::new(0.2, 0.0, 0.0), Vec3::zeros(), params(0.1, 1.0), vec![]).is_err());
    }
}
