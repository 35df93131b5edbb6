#![allow(dead_code)]

use imls_core::field::{OrientedPoint, PointCloud};
use imls_core::kernel::{KernelKind, KernelParams};
use imls_core::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// `n` points anywhere in the unit cube with support radii in `radius`.
pub fn scattered_cloud<R: Rng>(
    rng: &mut R,
    n: usize,
    radius: std::ops::Range<f64>,
    kind: KernelKind,
    feature_dim: usize,
) -> PointCloud {
    let points = (0..n)
        .map(|_| {
            let p = Vec3::new(rng.random(), rng.random(), rng.random());
            let m = rng.random_range(1.0..6.0);
            let r: f64 = rng.random_range(radius.clone());
            let feature = (0..feature_dim).map(|_| rng.random()).collect();
            OrientedPoint::new(p, unit_vector(rng), KernelParams::new(r * r / m, m).unwrap(), feature).unwrap()
        })
        .collect();
    PointCloud::new(points, kind).unwrap()
}

pub const KINDS: [KernelKind; 2] = [KernelKind::Compact, KernelKind::Exponential];
