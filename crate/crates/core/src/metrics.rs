//! Geometry and image quality metrics.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::Vec3;

/// Uniform spatial hash over a fixed point set, answering exact nearest
/// neighbour distance queries by widening rings of cells.
pub struct PointIndex<'a> {
    points: &'a [Vec3],
    cell: f64,
    origin: Vec3,
    cells: HashMap<[i64; 3], Vec<u32>>,
    extent: [i64; 3],
}

impl<'a> PointIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot index an empty point set"));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let span = (hi - lo).max();
        // About n^(1/3) cells per axis: dense near surfaces, few rings to
        // reach queries away from them.
        let cell = if span > 0.0 {
            span / (points.len() as f64).cbrt().max(1.0)
        } else {
            1.0
        };
        let key = |p: &Vec3| -> [i64; 3] {
            let g = (p - lo) / cell;
            [g.x.floor() as i64, g.y.floor() as i64, g.z.floor() as i64]
        };
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p)).or_default().push(i as u32);
        }
        let top = key(&hi);
        Ok(Self {
            points,
            cell,
            origin: lo,
            cells,
            extent: top,
        })
    }

    fn cell_of(&self, p: &Vec3) -> [i64; 3] {
        let g = (p - self.origin) / self.cell;
        [g.x.floor() as i64, g.y.floor() as i64, g.z.floor() as i64]
    }

    /// Distance from `q` to the closest indexed point.
    pub fn nearest_distance(&self, q: &Vec3) -> f64 {
        self.nearest(q, None).map_or(f64::INFINITY, |(_, d)| d)
    }

    /// Index of and distance to the closest indexed point other than `skip`.
    pub fn nearest(&self, q: &Vec3, skip: Option<usize>) -> Option<(usize, f64)> {
        let c = self.cell_of(q);
        let gap = |a: usize| (0 - c[a]).max(c[a] - self.extent[a]).max(0);
        let reach = |a: usize| c[a].abs().max((c[a] - self.extent[a]).abs());
        // Rings inside `first` are empty; rings beyond `last` hold no cells.
        let first = gap(0).max(gap(1)).max(gap(2));
        let last = reach(0).max(reach(1)).max(reach(2));
        let mut best: Option<(usize, f64)> = None;
        let mut ring = first;
        loop {
            self.visit_ring(c, ring, |i| {
                let i = i as usize;
                if Some(i) == skip {
                    return;
                }
                let d = (self.points[i] - q).norm_squared();
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((i, d));
                }
            });
            // Anything in ring + 1 lies at least `ring * cell` away.
            let bound = ring as f64 * self.cell;
            if best.is_some_and(|(_, b)| b <= bound * bound) || ring >= last {
                break;
            }
            ring += 1;
        }
        best.map(|(i, d)| (i, d.sqrt()))
    }

    /// Mean distance from each indexed point to its nearest other point.
    pub fn mean_spacing(&self) -> Option<f64> {
        if self.points.len() < 2 {
            return None;
        }
        let d: Vec<f64> = (0..self.points.len())
            .into_par_iter()
            .map(|i| self.nearest(&self.points[i], Some(i)).map_or(0.0, |(_, d)| d))
            .collect();
        Some(d.iter().sum::<f64>() / d.len() as f64)
    }

    fn visit_ring(&self, c: [i64; 3], ring: i64, mut f: impl FnMut(u32)) {
        let range = |a: usize| (c[a] - ring).max(0)..=(c[a] + ring).min(self.extent[a]);
        let mut visit = |key: [i64; 3]| {
            if let Some(ids) = self.cells.get(&key) {
                ids.iter().for_each(|&i| f(i));
            }
        };
        for z in range(2) {
            for y in range(1) {
                if (z - c[2]).abs() == ring || (y - c[1]).abs() == ring {
                    for x in range(0) {
                        visit([x, y, z]);
                    }
                } else {
                    // Interior rows only touch the ring at their two ends.
                    for x in [c[0] - ring, c[0] + ring] {
                        if (0..=self.extent[0]).contains(&x) {
                            visit([x, y, z]);
                        }
                    }
                }
            }
        }
    }
}

fn mean_nearest(from: &[Vec3], to: &PointIndex<'_>) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|p| to.nearest_distance(p)).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Mean distance from each point of `from` to its nearest neighbour in `to`.
pub fn one_sided_distance(from: &[Vec3], to: &[Vec3]) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::invalid("one-sided distance needs two non-empty point sets"));
    }
    Ok(mean_nearest(from, &PointIndex::new(to)?))
}

/// Symmetric Chamfer distance: the average of the two mean nearest-neighbour
/// distances.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty point sets"));
    }
    let ia = PointIndex::new(a)?;
    let ib = PointIndex::new(b)?;
    let ab = mean_nearest(a, &ib);
    let ba = mean_nearest(b, &ia);
    Ok(0.5 * (ab + ba))
}

/// Row-major pixels with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images need 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "expected {} pixel values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Loads an 8- or 16-bit PNG. Grayscale stays single-channel, everything
    /// else is converted to RGB; alpha is dropped.
    pub fn from_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, pixels) = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma16();
                (1, g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
            }
            _ => {
                let rgb = img.to_rgb16();
                (3, rgb.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
            }
        };
        Self::new(w, h, channels, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn channel_plane(&self, c: usize) -> Vec<f64> {
        self.pixels.iter().skip(c).step_by(self.channels).copied().collect()
    }
}

fn check_same_shape(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn l1(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.pixels.len() as f64)
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / a.pixels.len() as f64)
}

/// Peak signal-to-noise ratio for peak value 1; `+inf` for identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let e = mse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Separable same-size convolution with zero padding.
fn blur(plane: &[f64], width: usize, height: usize, window: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in window.iter().enumerate() {
                let xx = x as isize + k as isize - half;
                if xx >= 0 && (xx as usize) < width {
                    acc += w * plane[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in window.iter().enumerate() {
                let yy = y as isize + k as isize - half;
                if yy >= 0 && (yy as usize) < height {
                    acc += w * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), zero-padded to the
/// image size, averaged over pixels and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    let window = gaussian_window();
    let mut total = 0.0;
    for c in 0..a.channels {
        let x = a.channel_plane(c);
        let y = b.channel_plane(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = blur(&x, w, h, &window);
        let mu_y = blur(&y, w, h, &window);
        let e_xx = blur(&xx, w, h, &window);
        let e_yy = blur(&yy, w, h, &window);
        let e_xy = blur(&xy, w, h, &window);
        for i in 0..w * h {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = e_xx[i] - mx * mx;
            let var_y = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2));
        }
    }
    Ok(total / (w * h * a.channels) as f64)
}

/// Structural dissimilarity `(1 - SSIM) / 2`.
pub fn dssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// Default mixing weight of the D-SSIM term.
pub const DEFAULT_LAMBDA_MIX: f64 = 0.2;

/// `(1 - λ) L1 + λ D-SSIM`.
pub fn composite_loss(image: &ImageBuffer, target: &ImageBuffer, lambda_mix: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_mix) {
        return Err(Error::invalid(format!("lambda_mix must lie in [0, 1], got {lambda_mix}")));
    }
    Ok((1.0 - lambda_mix) * l1(image, target)? + lambda_mix * dssim(image, target)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.5, 0.5, 0.5)];
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        let d = chamfer_distance(&[Vec3::zeros()], &[Vec3::new(0.0, 0.0, 1.0)]).unwrap();
        assert_eq!(d, 1.0);
        assert!(chamfer_distance(&[], &a).is_err());
    }

    #[test]
    fn nearest_handles_far_queries() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.01, 0.0, 0.0), Vec3::new(0.0, 0.02, 0.0)];
        let index = PointIndex::new(&pts).unwrap();
        let d = index.nearest_distance(&Vec3::new(5.0, 5.0, 5.0));
        let expected = pts
            .iter()
            .map(|p| (Vec3::new(5.0, 5.0, 5.0) - p).norm())
            .fold(f64::INFINITY, f64::min);
        assert!((d - expected).abs() < 1e-12);
        let single = vec![Vec3::new(0.3, 0.3, 0.3)];
        let index = PointIndex::new(&single).unwrap();
        assert!((index.nearest_distance(&Vec3::new(0.3, 0.3, 1.3)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_with_exclusion_matches_brute_force() {
        let pts: Vec<Vec3> = (0..200)
            .map(|i| {
                let t = i as f64;
                Vec3::new((t * 0.37).sin().abs(), (t * 1.13).cos().abs(), (t * 0.71).fract())
            })
            .collect();
        let index = PointIndex::new(&pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let (j, d) = index.nearest(p, Some(i)).unwrap();
            let expected = pts
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, q)| (q - p).norm())
                .fold(f64::INFINITY, f64::min);
            assert_ne!(i, j);
            assert_eq!(d, expected);
        }
        let single = [Vec3::zeros()];
        assert!(PointIndex::new(&single).unwrap().nearest(&Vec3::zeros(), Some(0)).is_none());
        assert!(PointIndex::new(&single).unwrap().mean_spacing().is_none());
    }

    #[test]
    fn psnr_and_mse_examples() {
        let a = ImageBuffer::filled(4, 4, 1, 0.3).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = ImageBuffer::filled(4, 4, 1, 0.4).unwrap();
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);

        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let c = ImageBuffer::new(4, 4, 1, checker).unwrap();
        let half = ImageBuffer::filled(4, 4, 1, 0.5).unwrap();
        assert_eq!(mse(&c, &half).unwrap(), 0.25);
    }

    #[test]
    fn composite_examples() {
        let zero = ImageBuffer::filled(16, 16, 3, 0.0).unwrap();
        let one = ImageBuffer::filled(16, 16, 3, 1.0).unwrap();
        assert_eq!(composite_loss(&zero, &one, 0.0).unwrap(), 1.0);
        assert_eq!(composite_loss(&one, &one, 0.2).unwrap(), 0.0);
        assert!(composite_loss(&one, &one, 1.5).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = ImageBuffer::filled(4, 4, 1, 0.0).unwrap();
        let b = ImageBuffer::filled(4, 5, 1, 0.0).unwrap();
        let c = ImageBuffer::filled(4, 4, 3, 0.0).unwrap();
        assert!(mse(&a, &b).is_err());
        assert!(ssim(&a, &c).is_err());
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn invalid_buffers_rejected() {
        assert!(ImageBuffer::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(2, 2, 1, vec![0.0, 0.5, 1.5, 0.0]).is_err());
        assert!(ImageBuffer::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let pixels: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let a = ImageBuffer::new(10, 10, 3, pixels).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}
