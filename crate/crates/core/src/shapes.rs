//! Analytic test shapes: surface samplers and exact signed distances.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{OrientedPoint, PointCloud};
use crate::kernel::{KernelKind, KernelParams};
use crate::metrics::PointIndex;
use crate::Vec3;

const CENTER: Vec3 = Vec3::new(0.5, 0.5, 0.5);
pub const SPHERE_RADIUS: f64 = 0.3;
pub const TORUS_MAJOR: f64 = 0.25;
pub const TORUS_MINOR: f64 = 0.1;
pub const BOX_HALF_EXTENTS: [f64; 3] = [0.25, 0.2, 0.15];
/// The plane patch spans `[PLANE_LO, PLANE_HI]²` at `z = 0.5`.
pub const PLANE_LO: f64 = 0.1;
pub const PLANE_HI: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    /// Axis along z.
    Torus,
    Box,
    /// A square patch; its signed distance is that of the infinite plane.
    Plane,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Torus => "torus",
            ShapeKind::Box => "box",
            ShapeKind::Plane => "plane",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "torus" => Ok(ShapeKind::Torus),
            "box" => Ok(ShapeKind::Box),
            "plane" => Ok(ShapeKind::Plane),
            other => Err(Error::invalid(format!(
                "unknown shape `{other}` (expected sphere, torus, box or plane)"
            ))),
        }
    }
}

impl ShapeKind {
    /// Signed distance, positive outside.
    pub fn sdf(&self, q: &Vec3) -> f64 {
        let d = q - CENTER;
        match self {
            ShapeKind::Sphere => d.norm() - SPHERE_RADIUS,
            ShapeKind::Torus => {
                let ring = (d.x * d.x + d.y * d.y).sqrt() - TORUS_MAJOR;
                (ring * ring + d.z * d.z).sqrt() - TORUS_MINOR
            }
            ShapeKind::Box => {
                let e = d.abs() - Vec3::from(BOX_HALF_EXTENTS);
                e.sup(&Vec3::zeros()).norm() + e.max().min(0.0)
            }
            ShapeKind::Plane => d.z,
        }
    }

    /// A uniformly area-distributed surface sample and its outward normal.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec3, Vec3) {
        match self {
            ShapeKind::Sphere => {
                let n = random_unit(rng);
                (CENTER + n * SPHERE_RADIUS, n)
            }
            ShapeKind::Torus => {
                let phi = rng.random::<f64>() * 2.0 * PI;
                // Area element is proportional to R + r cos(theta).
                let theta = loop {
                    let t = rng.random::<f64>() * 2.0 * PI;
                    let accept = (TORUS_MAJOR + TORUS_MINOR * t.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                    if rng.random::<f64>() <= accept {
                        break t;
                    }
                };
                let n = Vec3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin());
                let ring = Vec3::new(phi.cos(), phi.sin(), 0.0) * TORUS_MAJOR;
                (CENTER + ring + n * TORUS_MINOR, n)
            }
            ShapeKind::Box => {
                let [a, b, c] = BOX_HALF_EXTENTS;
                let areas = [b * c, a * c, a * b];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = i;
                        break;
                    }
                    pick -= area;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vec3::zeros();
                for i in 0..3 {
                    p[i] = if i == axis {
                        sign * BOX_HALF_EXTENTS[i]
                    } else {
                        (2.0 * rng.random::<f64>() - 1.0) * BOX_HALF_EXTENTS[i]
                    };
                }
                let mut n = Vec3::zeros();
                n[axis] = sign;
                (CENTER + p, n)
            }
            ShapeKind::Plane => {
                let span = PLANE_HI - PLANE_LO;
                let p = Vec3::new(
                    PLANE_LO + span * rng.random::<f64>(),
                    PLANE_LO + span * rng.random::<f64>(),
                    0.5,
                );
                (p, Vec3::z())
            }
        }
    }

    /// `n` exact surface samples, for evaluation.
    pub fn surface_points(&self, n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_surface(&mut rng).0).collect()
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Rotates `n` by `angle` radians about a random axis perpendicular to it.
pub fn jitter_normal<R: Rng + ?Sized>(n: &Vec3, angle: f64, rng: &mut R) -> Vec3 {
    let axis = loop {
        let v = random_unit(rng);
        let perp = v - n * n.dot(&v);
        let len = perp.norm();
        if len > 1e-6 {
            break perp / len;
        }
    };
    (n * angle.cos() + axis.cross(n) * angle.sin()).normalize()
}

/// Default kernel for a cloud without per-point parameters: `m = 2` and
/// `k = (4 h)² / m`, so the support radius is four mean neighbour spacings.
pub fn default_kernel_params(positions: &[Vec3]) -> Result<KernelParams> {
    const SINGLE_POINT_SPACING: f64 = 0.01;
    let h = match PointIndex::new(positions)?.mean_spacing() {
        Some(h) if h > 0.0 => h,
        _ => SINGLE_POINT_SPACING,
    };
    let m = 2.0;
    KernelParams::new((4.0 * h).powi(2) / m, m)
}

/// Samples `n` oriented points on `kind` with Gaussian position noise of
/// standard deviation `noise_pos` and normals rotated by `noise_normal_deg`.
/// Returns the cloud, initialized with [`default_kernel_params`].
pub fn sample_shape(
    kind: ShapeKind,
    n: usize,
    noise_pos: f64,
    noise_normal_deg: f64,
    seed: u64,
) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    if !(noise_pos >= 0.0 && noise_normal_deg >= 0.0) {
        return Err(Error::invalid("noise levels must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = noise_normal_deg.to_radians();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let (mut p, mut normal) = kind.sample_surface(&mut rng);
        if noise_pos > 0.0 {
            for c in p.iter_mut() {
                *c = (*c + noise_pos * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
            }
        }
        if angle > 0.0 {
            normal = jitter_normal(&normal, angle, &mut rng);
        }
        samples.push((p, normal));
    }
    let positions: Vec<Vec3> = samples.iter().map(|s| s.0).collect();
    let kernel = default_kernel_params(&positions)?;
    let points = samples
        .into_iter()
        .map(|(p, normal)| OrientedPoint::new(p, normal, kernel, Vec::new()))
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(points, KernelKind::Compact)
}
