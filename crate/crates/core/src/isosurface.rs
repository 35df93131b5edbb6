//! Zero-level-set extraction by marching cubes.
//!
//! Values equal to the iso level count as positive. Crossing vertices are keyed
//! by the grid edge they lie on and emitted once, so neighbouring cells share
//! vertices and closed level sets come out watertight. Ambiguous faces follow
//! the case table without an asymptotic decider.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mc_tables::{CORNER_OFFSETS, EDGE_CORNERS, TRIANGLES};
use crate::mesh::Mesh;
use crate::splat::{vertex_position, SplatGrid};
use crate::Vec3;

/// Extracts the `iso` level set of a finalized grid's SDF.
pub fn marching_cubes(grid: &SplatGrid, iso: f64) -> Result<Mesh> {
    if !grid.is_finalized() {
        return Err(Error::invalid("grid must be finalized before extraction"));
    }
    marching_cubes_values(grid.resolution(), &grid.sdf, iso)
}

/// Marching cubes over raw vertex values laid out like [`SplatGrid::sdf`].
pub fn marching_cubes_values(resolution: usize, values: &[f64], iso: f64) -> Result<Mesh> {
    if resolution < 2 {
        return Err(Error::invalid("resolution must be >= 2"));
    }
    if values.len() != resolution.pow(3) {
        return Err(Error::invalid(format!(
            "expected {} values, got {}",
            resolution.pow(3),
            values.len()
        )));
    }
    let r = resolution;
    let id = |i: usize, j: usize, l: usize| i + r * (j + r * l);
    let strides = [1, r, r * r];

    // Triangles per z-slab, as triples of edge keys `3 * lower_vertex + axis`.
    let slabs: Vec<Vec<[u64; 3]>> = (0..r - 1)
        .into_par_iter()
        .map(|l| {
            let mut tris = Vec::new();
            for j in 0..r - 1 {
                for i in 0..r - 1 {
                    let corners = CORNER_OFFSETS.map(|[dx, dy, dz]| id(i + dx, j + dy, l + dz));
                    let mut case = 0usize;
                    for (c, &v) in corners.iter().enumerate() {
                        if values[v] < iso {
                            case |= 1 << c;
                        }
                    }
                    if case == 0 || case == 255 {
                        continue;
                    }
                    let edge_key = |e: i8| -> u64 {
                        let [c0, c1] = EDGE_CORNERS[e as usize];
                        let (a, b) = (corners[c0].min(corners[c1]), corners[c0].max(corners[c1]));
                        let axis = strides.iter().position(|&s| b - a == s).unwrap();
                        3 * a as u64 + axis as u64
                    };
                    for tri in TRIANGLES[case].chunks_exact(3) {
                        if tri[0] < 0 {
                            break;
                        }
                        // The table winds toward the negative side; flip to face
                        // the positive side.
                        tris.push([edge_key(tri[0]), edge_key(tri[2]), edge_key(tri[1])]);
                    }
                }
            }
            tris
        })
        .collect();

    let mut mesh = Mesh::default();
    let mut lookup: HashMap<u64, u32> = HashMap::new();
    for tri in slabs.into_iter().flatten() {
        let idx = tri.map(|key| {
            *lookup.entry(key).or_insert_with(|| {
                let a = (key / 3) as usize;
                let b = a + strides[(key % 3) as usize];
                mesh.vertices.push(edge_crossing(resolution, values, a, b, iso));
                (mesh.vertices.len() - 1) as u32
            })
        });
        mesh.triangles.push(idx);
    }
    mesh.compute_vertex_normals();
    Ok(mesh)
}

fn edge_crossing(resolution: usize, values: &[f64], a: usize, b: usize, iso: f64) -> Vec3 {
    let (pa, pb) = (vertex_position(resolution, a), vertex_position(resolution, b));
    let (fa, fb) = (values[a], values[b]);
    let denom = fb - fa;
    if denom == 0.0 {
        return (pa + pb) * 0.5;
    }
    let t = ((iso - fa) / denom).clamp(0.0, 1.0);
    pa + (pb - pa) * t
}

/// Replaces negative values on the outer layer of the grid with `fill`, so the
/// extracted surface closes one cell inside the domain instead of ending at its
/// faces.
pub fn close_domain_boundary(resolution: usize, values: &mut [f64], iso: f64, fill: f64) {
    let r = resolution;
    for l in 0..r {
        for j in 0..r {
            for i in 0..r {
                let on_face = i == 0 || j == 0 || l == 0 || i == r - 1 || j == r - 1 || l == r - 1;
                let v = i + r * (j + r * l);
                if on_face && values[v] < iso {
                    values[v] = fill;
                }
            }
        }
    }
}

/// Trilinearly interpolates the finalized texture field onto the mesh
/// vertices, renormalizing over covered grid vertices. Returns the indices of
/// mesh vertices with no covered neighbour; those receive a zero feature.
pub fn interpolate_vertex_attributes(mesh: &mut Mesh, grid: &SplatGrid) -> Result<Vec<usize>> {
    if !grid.is_finalized() {
        return Err(Error::invalid("grid must be finalized before interpolation"));
    }
    let d = grid.feature_dim();
    let mut flagged = Vec::new();
    let mut features = Vec::with_capacity(mesh.vertices.len());
    for (idx, v) in mesh.vertices.iter().enumerate() {
        let st = grid.stencil(v);
        let mut acc = vec![0.0; d];
        let mut total = 0.0;
        let mut covered = Vec::new();
        for (&gv, &w) in st.vertices.iter().zip(&st.weights) {
            if let Some(f) = grid.vertex_feature(gv) {
                for (a, c) in acc.iter_mut().zip(&f) {
                    *a += w * c;
                }
                total += w;
                covered.push(f);
            }
        }
        if covered.is_empty() {
            flagged.push(idx);
            features.push(vec![0.0; d]);
        } else if total > 0.0 {
            features.push(acc.into_iter().map(|a| a / total).collect());
        } else {
            // Only zero-weight corners are covered; fall back to their mean.
            let n = covered.len() as f64;
            let mut mean = vec![0.0; d];
            for f in &covered {
                for (m, c) in mean.iter_mut().zip(f) {
                    *m += c / n;
                }
            }
            features.push(mean);
        }
    }
    mesh.vertex_features = Some(features);
    Ok(flagged)
}

/// Samples `sdf` at every vertex of an `R³` grid over the unit cube.
pub fn sample_values(resolution: usize, sdf: impl Fn(&Vec3) -> f64 + Sync) -> Vec<f64> {
    (0..resolution.pow(3))
        .into_par_iter()
        .map(|v| sdf(&vertex_position(resolution, v)))
        .collect()
}
