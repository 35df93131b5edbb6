//! Finite-difference checks of every hand-derived gradient, from the kernel up
//! to the supervision loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::field::{eval_sdf, eval_sdf_with_grads, OrientedPoint, PointCloud};
use crate::kernel::{grad_k, grad_m, grad_s, eval_compact, KernelKind, KernelParams};
use crate::optimize::{loss_and_gradients, LossFilter, LossKind, Target};
use crate::splat::{bin_points, build_grid, default_background_sdf, splat_backward};
use crate::Vec3;

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative errors. A few ulps of round-off in values
/// near 1, divided by the step 2e-6, is about 1e-9, so gradients below the floor
/// are effectively compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Perturbations that moved a point-vertex pair across the truncation
    /// radius of the exponential kernel, where the weight jumps.
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Number of scalar attributes per point: position, normal, k, m, features.
pub fn attribute_count(feature_dim: usize) -> usize {
    8 + feature_dim
}

/// Reads attribute `slot` in the order of [`crate::field::PointGradient::to_flat`].
pub fn attribute(point: &OrientedPoint, slot: usize) -> f64 {
    match slot {
        0..=2 => point.position[slot],
        3..=5 => point.normal[slot - 3],
        6 => point.kernel.k(),
        7 => point.kernel.m(),
        _ => point.feature[slot - 8],
    }
}

/// Overwrites attribute `slot` without renormalizing the normal, so finite
/// differences see the same raw parameter the gradient refers to.
pub fn set_attribute(point: &mut OrientedPoint, slot: usize, value: f64) -> Result<()> {
    match slot {
        0..=2 => point.position[slot] = value,
        3..=5 => point.normal[slot - 3] = value,
        6 => point.kernel = KernelParams::new(value, point.kernel.m())?,
        7 => point.kernel = KernelParams::new(point.kernel.k(), value)?,
        _ => point.feature[slot - 8] = value,
    }
    Ok(())
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// `n` points in `[0.35, 0.65]³` with random normals and support radii in
/// `[0.12, 0.2]`.
pub fn random_cloud<R: Rng>(rng: &mut R, n: usize, kind: KernelKind) -> Result<PointCloud> {
    let points = (0..n)
        .map(|_| {
            let p = Vec3::new(rng.random_range(0.35..0.65), rng.random_range(0.35..0.65), rng.random_range(0.35..0.65));
            let m = rng.random_range(1.5..4.0);
            let r: f64 = rng.random_range(0.12..0.2);
            OrientedPoint::new(p, random_unit(rng), KernelParams::new(r * r / m, m)?, Vec::new())
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(points, kind)
}

/// Compact kernel partials at `n` random `(s, k, m)` strictly inside the
/// support.
pub fn check_kernel(seed: u64, n: usize) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = FD_STEP;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(0.1..2.0);
        let m = rng.random_range(1.0 + 2.0 * h..8.0);
        let s = rng.random_range(h..0.95 * m * k);
        let p = |k: f64, m: f64| KernelParams::new(k, m).unwrap();
        let base = p(k, m);
        let fd_s = (eval_compact(s + h, &base) - eval_compact(s - h, &base)) / (2.0 * h);
        let fd_k = (eval_compact(s, &p(k + h, m)) - eval_compact(s, &p(k - h, m))) / (2.0 * h);
        let fd_m = (eval_compact(s, &p(k, m + h)) - eval_compact(s, &p(k, m - h))) / (2.0 * h);
        for (a, f) in [(grad_s(s, &base), fd_s), (grad_k(s, &base), fd_k), (grad_m(s, &base), fd_m)] {
            worst = worst.max(rel_error(a, f, GRAD_FLOOR));
        }
    }
    CheckReport {
        name: "kernel partials".into(),
        checked: 3 * n,
        max_rel_error: worst,
        tolerance: 1e-4,
        skipped: 0,
    }
}

/// Richardson-extrapolated central difference `(4 D(h/2) - D(h)) / 3` with
/// `D(t) = (f(x + t) - f(x - t)) / 2t`. Near a support boundary the kernel
/// varies on scales not far above `h`, and the plain central difference is
/// off by a few 1e-4. `None` when `f` is undefined at any sample.
fn extrapolated_difference<F>(mut f: F, x: f64, h: f64) -> Result<Option<f64>>
where
    F: FnMut(f64) -> Result<Option<f64>>,
{
    let mut values = [0.0; 4];
    for (v, t) in values.iter_mut().zip([x + h, x - h, x + 0.5 * h, x - 0.5 * h]) {
        match f(t)? {
            Some(y) => *v = y,
            None => return Ok(None),
        }
    }
    let wide = (values[0] - values[1]) / (2.0 * h);
    let narrow = (values[2] - values[3]) / h;
    Ok(Some((4.0 * narrow - wide) / 3.0))
}

/// Brute-force field gradients against perturbing each attribute.
pub fn check_field(seed: u64, kind: KernelKind) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = FD_STEP;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for _ in 0..5 {
        let cloud = random_cloud(&mut rng, 8, kind)?;
        let q = Vec3::new(rng.random_range(0.4..0.6), rng.random_range(0.4..0.6), rng.random_range(0.4..0.6));
        let Ok((_, grads)) = eval_sdf_with_grads(&q, &cloud, 1.0) else {
            continue;
        };
        for (i, grad) in grads.points.iter().enumerate() {
            let flat = grad.to_flat();
            for (slot, &analytic) in flat.iter().enumerate() {
                let value = attribute(&cloud.points[i], slot);
                let eval = |v: f64| -> Result<Option<f64>> {
                    let mut c = cloud.clone();
                    set_attribute(&mut c.points[i], slot, v)?;
                    Ok(eval_sdf(&q, &c))
                };
                if kind == KernelKind::Exponential {
                    let inside = |v: f64| -> Result<Vec<bool>> {
                        let mut c = cloud.clone();
                        set_attribute(&mut c.points[i], slot, v)?;
                        Ok(c.points
                            .iter()
                            .map(|p| (q - p.position).norm_squared() < p.kernel.support_radius_sq())
                            .collect())
                    };
                    if inside(value + h)? != inside(value - h)? {
                        skipped += 1;
                        continue;
                    }
                }
                let Some(fd) = extrapolated_difference(eval, value, h)? else {
                    continue;
                };
                worst = worst.max(rel_error(analytic, fd, GRAD_FLOOR));
                checked += 1;
            }
        }
    }
    Ok(CheckReport {
        name: format!("field gradients ({kind})"),
        checked,
        max_rel_error: worst,
        tolerance: 1e-4,
        skipped,
    })
}

/// True when the two clouds pair different vertices under the exponential
/// kernel. The compact kernel vanishes smoothly at its support radius, so its
/// pairings may change freely.
fn crosses_truncation(a: &PointCloud, b: &PointCloud, resolution: usize) -> Result<bool> {
    if a.kernel != KernelKind::Exponential {
        return Ok(false);
    }
    Ok(bin_points(a, resolution)?.pairs() != bin_points(b, resolution)?.pairs())
}

/// Splat backward pass against re-splatting: the scalar is `Σ g_v sdf_v` over
/// well-covered vertices with random `g`.
pub fn check_splat(seed: u64, kind: KernelKind) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = FD_STEP;
    let r = 8;
    let bg = default_background_sdf(r);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for _ in 0..3 {
        let cloud = random_cloud(&mut rng, 5, kind)?;
        let (index, grid) = build_grid(&cloud, r, bg)?;
        let upstream: Vec<f64> = (0..grid.n_vertices())
            .map(|v| if grid.weight_sum[v] > 1e-4 { rng.random_range(-1.0..1.0) } else { 0.0 })
            .collect();
        let grads = splat_backward(&cloud, &index, &grid, &upstream)?;
        let objective = |c: &PointCloud| -> Result<f64> {
            let (_, g) = build_grid(c, r, bg)?;
            Ok(g.sdf.iter().zip(&upstream).map(|(s, u)| s * u).sum())
        };
        for (i, grad) in grads.points.iter().enumerate() {
            for (slot, &analytic) in grad.to_flat().iter().enumerate() {
                let value = attribute(&cloud.points[i], slot);
                let mut plus = cloud.clone();
                set_attribute(&mut plus.points[i], slot, value + h)?;
                let mut minus = cloud.clone();
                set_attribute(&mut minus.points[i], slot, value - h)?;
                if crosses_truncation(&plus, &minus, r)? {
                    skipped += 1;
                    continue;
                }
                let eval = |v: f64| -> Result<Option<f64>> {
                    let mut c = cloud.clone();
                    set_attribute(&mut c.points[i], slot, v)?;
                    objective(&c).map(Some)
                };
                let fd = extrapolated_difference(eval, value, h)?.expect("objective is total");
                worst = worst.max(rel_error(analytic, fd, GRAD_FLOOR));
                checked += 1;
            }
        }
    }
    Ok(CheckReport {
        name: format!("splat backward ({kind})"),
        checked,
        max_rel_error: worst,
        tolerance: 1e-4,
        skipped,
    })
}

/// Whole pipeline: bin, splat, finalize, trilinear lookup and L1 loss, on a
/// 16³ grid with the filter off.
pub fn check_pipeline(seed: u64, n_points: usize, kind: KernelKind) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = FD_STEP;
    let r = 16;
    let bg = default_background_sdf(r);
    let cloud = random_cloud(&mut rng, n_points, kind)?;
    let (_, grid) = build_grid(&cloud, r, bg)?;
    // Keep targets whose cells are well inside the coverage so a perturbation
    // of size `h` cannot change which targets count.
    let targets: Vec<Target> = (0..4000)
        .filter_map(|_| {
            let q = Vec3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
            let st = grid.stencil(&q);
            st.vertices.iter().all(|&v| grid.weight_sum[v] > 1e-4).then(|| Target {
                query: q,
                sdf: (q - Vec3::new(0.5, 0.5, 0.5)).norm() - 0.1,
            })
        })
        .take(300)
        .collect();
    let filter = LossFilter::off();
    let loss = |c: &PointCloud| loss_and_gradients(c, r, bg, &filter, LossKind::SdfL1, &targets);
    let (_, grads) = loss(&cloud)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for (i, grad) in grads.points.iter().enumerate() {
        for (slot, &analytic) in grad.to_flat().iter().enumerate() {
            let value = attribute(&cloud.points[i], slot);
            let mut plus = cloud.clone();
            set_attribute(&mut plus.points[i], slot, value + h)?;
            let mut minus = cloud.clone();
            set_attribute(&mut minus.points[i], slot, value - h)?;
            if crosses_truncation(&plus, &minus, r)? {
                skipped += 1;
                continue;
            }
            let eval = |v: f64| -> Result<Option<f64>> {
                let mut c = cloud.clone();
                set_attribute(&mut c.points[i], slot, v)?;
                Ok(Some(loss(&c)?.0))
            };
            let fd = extrapolated_difference(eval, value, h)?.expect("loss is total");
            worst = worst.max(rel_error(analytic, fd, GRAD_FLOOR));
            checked += 1;
        }
    }
    Ok(CheckReport {
        name: format!("full pipeline ({kind}, {n_points} points)"),
        checked,
        max_rel_error: worst,
        tolerance: 1e-3,
        skipped,
    })
}

/// Every suite for both kernels.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = vec![check_kernel(seed, 1000)];
    for kind in [KernelKind::Compact, KernelKind::Exponential] {
        reports.push(check_field(seed, kind)?);
        reports.push(check_splat(seed, kind)?);
        reports.push(check_pipeline(seed, 12, kind)?);
    }
    Ok(reports)
}
