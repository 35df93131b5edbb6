//! Indexed triangle meshes.

use std::collections::HashMap;

use rand::Rng;

use crate::Vec3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise when seen from the positive side of the field.
    pub triangles: Vec<[u32; 3]>,
    pub vertex_normals: Vec<Vec3>,
    pub vertex_features: Option<Vec<Vec<f64>>>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn face_normal_unnormalized(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| 0.5 * self.face_normal_unnormalized(t).norm())
            .sum()
    }

    /// Undirected edges used by a number of triangles other than two.
    pub fn non_manifold_edges(&self) -> usize {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        counts.values().filter(|&&c| c != 2).count()
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        self.non_manifold_edges() == 0
    }

    /// Every directed edge appears once, i.e. neighbouring triangles agree on
    /// winding.
    pub fn is_consistently_oriented(&self) -> bool {
        let mut seen: HashMap<(u32, u32), u32> = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                *seen.entry((tri[e], tri[(e + 1) % 3])).or_default() += 1;
            }
        }
        seen.iter()
            .all(|(&(a, b), &c)| c == 1 && seen.get(&(b, a)).copied().unwrap_or(0) <= 1)
    }

    pub fn validate_indices(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.triangles.iter().all(|t| t.iter().all(|&i| i < n))
    }

    /// Area-weighted vertex normals. Returns the indices of vertices that
    /// received the fallback normal `(0, 0, 1)` because their incident face
    /// normals summed to zero (including isolated vertices).
    pub fn compute_vertex_normals(&mut self) -> Vec<usize> {
        let mut sums = vec![Vec3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.face_normal_unnormalized(t);
            for &i in tri {
                sums[i as usize] += n;
            }
        }
        let mut flagged = Vec::new();
        self.vertex_normals = sums
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                let len = n.norm();
                if len > 0.0 && len.is_finite() {
                    n / len
                } else {
                    flagged.push(i);
                    Vec3::z()
                }
            })
            .collect();
        flagged
    }

    /// `n` points distributed uniformly by area over the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += 0.5 * self.face_normal_unnormalized(t).norm();
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let target = rng.random::<f64>() * total;
                let t = cumulative.partition_point(|&c| c < target).min(self.triangles.len() - 1);
                let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
                let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }
}
