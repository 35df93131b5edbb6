//! SDF-supervised fitting of point attributes.
//!
//! Each step bins and splats the cloud, evaluates the (optionally filtered) grid
//! field at supervision queries, and pushes the loss gradient back through
//! trilinear interpolation and the splat to every point attribute. Parameters
//! are updated with Adam using one learning rate per attribute group.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{AttributeGradients, PointCloud};
use crate::filtering::{
    anneal_alpha, laplacian_weight, query_rng, reflect_point, sample_offset, FilterConfig,
};
use crate::isosurface::{close_domain_boundary, interpolate_vertex_attributes, marching_cubes_values};
use crate::kernel::{KernelKind, KernelParams, K_MIN, M_MAX, M_MIN};
use crate::mesh::Mesh;
use crate::splat::{build_grid, default_background_sdf, splat_backward, BinIndex, SplatGrid};
use crate::Vec3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    SdfL1,
    SdfL2,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::SdfL1 => "sdf_l1",
            LossKind::SdfL2 => "sdf_l2",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sdf_l1" | "l1" => Ok(LossKind::SdfL1),
            "sdf_l2" | "l2" => Ok(LossKind::SdfL2),
            other => Err(Error::invalid(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub normal: f64,
    pub k: f64,
    pub m: f64,
    pub feature: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1e-3,
            normal: 1e-3,
            k: 1e-4,
            m: 1e-3,
            feature: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            normal: 0.0,
            k: 0.0,
            m: 0.0,
            feature: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionConfig {
    pub resolution: usize,
    pub steps: usize,
    pub lr: LearningRates,
    /// `filter.alpha` is the initial noise scale `α₀`.
    pub filter: FilterConfig,
    pub supervision_samples: usize,
    pub loss: LossKind,
    pub kernel: KernelKind,
    /// Defaults to two grid spacings.
    pub background_sdf: Option<f64>,
    /// Clear the Adam moments on the first step with `α = 0`. The filtered
    /// loss has gradients of order `λ/α`, which would otherwise dominate the
    /// second-moment estimate long after the filter is switched off.
    pub reset_moments_after_anneal: bool,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            steps: 300,
            lr: LearningRates::default(),
            filter: FilterConfig::default(),
            supervision_samples: 4096,
            loss: LossKind::SdfL1,
            kernel: KernelKind::Compact,
            background_sdf: None,
            reset_moments_after_anneal: true,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::invalid(format!("resolution must be >= 8, got {}", self.resolution)));
        }
        let lr = &self.lr;
        for (name, v) in [
            ("lr_position", lr.position),
            ("lr_normal", lr.normal),
            ("lr_k", lr.k),
            ("lr_m", lr.m),
            ("lr_feature", lr.feature),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.supervision_samples == 0 {
            return Err(Error::invalid("supervision_samples must be >= 1"));
        }
        if let Some(b) = self.background_sdf {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::invalid(format!("background_sdf must be positive, got {b}")));
            }
        }
        self.filter.validate()
    }

    pub fn background(&self) -> f64 {
        self.background_sdf
            .unwrap_or_else(|| default_background_sdf(self.resolution))
    }
}

/// A supervision query and its ground-truth signed distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub query: Vec3,
    pub sdf: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// `dL/dsdf[v]` for every grid vertex; zero at uncovered vertices.
    pub vertex_grads: Vec<f64>,
    /// Targets whose samples all fell into fully covered cells.
    pub used_targets: usize,
}

/// Filter parameters for one evaluation: noise scale already annealed.
#[derive(Clone, Copy, Debug)]
pub struct LossFilter {
    pub alpha: f64,
    pub lambda_lap: f64,
    pub mc_samples: usize,
    pub dim_corrected: bool,
    pub seed: u64,
    pub step: u64,
}

impl LossFilter {
    pub fn off() -> Self {
        Self {
            alpha: 0.0,
            lambda_lap: 0.0,
            mc_samples: 1,
            dim_corrected: true,
            seed: 0,
            step: 0,
        }
    }

    /// Perturbed query positions and their weights `(1 + λ Lap-weight) / M`
    /// for target `index`. A single unit-weight sample at `q` when `α = 0`.
    pub fn samples(&self, q: &Vec3, index: usize) -> Vec<(Vec3, f64)> {
        if self.alpha == 0.0 {
            return vec![(*q, 1.0)];
        }
        let mut rng = query_rng(self.seed, self.step, index as u64);
        let m = self.mc_samples as f64;
        (0..self.mc_samples)
            .map(|_| {
                let delta = sample_offset(self.alpha, &mut rng);
                let w = 1.0 + self.lambda_lap * laplacian_weight(&delta, self.alpha, self.dim_corrected);
                (reflect_point(&(q + delta)), w / m)
            })
            .collect()
    }

    pub fn from_config(cfg: &FilterConfig, alpha: f64, step: usize) -> Self {
        Self {
            alpha,
            lambda_lap: cfg.lambda_lap,
            mc_samples: cfg.mc_samples.max(1),
            dim_corrected: cfg.dim_corrected,
            seed: cfg.seed,
            step: step as u64,
        }
    }
}

/// Replaces each target value with the same filter applied to the ground
/// truth, using the perturbations the loss will draw for that target.
pub fn filter_targets<F>(targets: &mut [Target], oracle: &F, filter: &LossFilter)
where
    F: Fn(&Vec3) -> f64 + Sync + ?Sized,
{
    if filter.alpha == 0.0 {
        return;
    }
    targets.par_iter_mut().enumerate().for_each(|(i, t)| {
        t.sdf = filter
            .samples(&t.query, i)
            .into_iter()
            .map(|(q, w)| w * oracle(&q))
            .sum();
    });
}

/// Mean L1 or L2 error between the filtered grid field and the targets, with
/// its gradient in every grid vertex value.
///
/// The filtered field at a target is `Σ_j w_j f(R(q + δ_j))` with
/// `w_j = (1 + λ Lap-weight(δ_j)) / M` and `f` the trilinear interpolant of the
/// finalized grid. Targets with any sample in a cell that touches an uncovered
/// vertex are skipped, and the mean runs over the remaining ones.
pub fn sdf_supervision_loss(
    grid: &SplatGrid,
    filter: &LossFilter,
    loss: LossKind,
    targets: &[Target],
) -> Result<LossOutput> {
    if !grid.is_finalized() {
        return Err(Error::invalid("grid must be finalized before evaluating the loss"));
    }
    if targets.is_empty() {
        return Err(Error::invalid("no supervision targets"));
    }

    // Per target: (residual, [(vertex, d value / d vertex)]).
    let per_target: Vec<Option<(f64, Vec<(usize, f64)>)>> = targets
        .par_iter()
        .enumerate()
        .map(|(i, target)| {
            let samples = filter.samples(&target.query, i);
            let mut value = 0.0;
            let mut partials = Vec::with_capacity(8 * samples.len());
            for (q, w) in samples {
                let st = grid.stencil(&q);
                if st.vertices.iter().any(|&v| !grid.covered[v]) {
                    return None;
                }
                for (&v, &tw) in st.vertices.iter().zip(&st.weights) {
                    value += w * tw * grid.sdf[v];
                    partials.push((v, w * tw));
                }
            }
            Some((value - target.sdf, partials))
        })
        .collect();

    let used = per_target.iter().filter(|t| t.is_some()).count();
    if used == 0 {
        return Err(Error::DegenerateSupervision);
    }
    let scale = 1.0 / used as f64;
    let mut total = 0.0;
    let mut vertex_grads = vec![0.0; grid.n_vertices()];
    for (residual, partials) in per_target.into_iter().flatten() {
        let (l, dl) = match loss {
            LossKind::SdfL1 => (residual.abs(), residual.signum() * (residual != 0.0) as u8 as f64),
            LossKind::SdfL2 => (residual * residual, 2.0 * residual),
        };
        total += l;
        if dl != 0.0 {
            for (v, d) in partials {
                vertex_grads[v] += scale * dl * d;
            }
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        vertex_grads,
        used_targets: used,
    })
}

/// Splat, evaluate the loss and pull its gradient back to the point attributes.
pub fn loss_and_gradients(
    cloud: &PointCloud,
    resolution: usize,
    background_sdf: f64,
    filter: &LossFilter,
    loss: LossKind,
    targets: &[Target],
) -> Result<(f64, AttributeGradients)> {
    let (index, grid) = build_grid(cloud, resolution, background_sdf)?;
    let out = sdf_supervision_loss(&grid, filter, loss, targets)?;
    let grads = splat_backward(cloud, &index, &grid, &out.vertex_grads)?;
    Ok((out.loss, grads))
}

/// Adam moments over the flattened attributes `p.xyz, n.xyz, k, m, c...` of
/// every point.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            t: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub cloud: PointCloud,
    pub step: usize,
    pub alpha_current: f64,
    pub loss_history: Vec<f64>,
    /// Noise scale used at each recorded step.
    pub alpha_history: Vec<f64>,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(cloud: PointCloud, cfg: &ReconstructionConfig) -> Self {
        let n_params = cloud.len() * (8 + cloud.feature_dim);
        Self {
            alpha_current: anneal_alpha(0, cfg.steps, cfg.filter.alpha, &cfg.filter),
            cloud,
            step: 0,
            loss_history: Vec::new(),
            alpha_history: Vec::new(),
            adam: AdamState::new(n_params),
        }
    }

    /// Unit normals, clamped kernel parameters, positions in the unit cube and
    /// the annealing schedule.
    pub fn check_invariants(&self, cfg: &ReconstructionConfig) -> Result<()> {
        let expected = anneal_alpha(self.step, cfg.steps, cfg.filter.alpha, &cfg.filter);
        if self.alpha_current != expected {
            return Err(Error::invalid("alpha_current is out of sync with the schedule"));
        }
        for (i, p) in self.cloud.points.iter().enumerate() {
            if (p.normal.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("point {i} normal is not unit length")));
            }
            let (k, m) = (p.kernel.k(), p.kernel.m());
            if !(k >= K_MIN && (M_MIN..=M_MAX).contains(&m)) {
                return Err(Error::invalid(format!("point {i} kernel params out of range")));
            }
            if !p.position.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::invalid(format!("point {i} left the unit cube")));
            }
        }
        Ok(())
    }
}

/// One optimization iteration on the given supervision targets.
pub fn step(state: &mut TrainState, cfg: &ReconstructionConfig, targets: &[Target]) -> Result<f64> {
    let alpha = anneal_alpha(state.step, cfg.steps, cfg.filter.alpha, &cfg.filter);
    state.alpha_current = alpha;
    if cfg.reset_moments_after_anneal && alpha == 0.0 && state.alpha_history.last().is_some_and(|&a| a > 0.0) {
        state.adam = AdamState::new(state.adam.first.len());
    }
    let filter = LossFilter::from_config(&cfg.filter, alpha, state.step);
    let (loss, grads) = loss_and_gradients(
        &state.cloud,
        cfg.resolution,
        cfg.background(),
        &filter,
        cfg.loss,
        targets,
    )?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss,
        });
    }
    apply_adam(state, &cfg.lr, &grads);

    state.loss_history.push(loss);
    state.alpha_history.push(alpha);
    state.step += 1;
    state.alpha_current = anneal_alpha(state.step, cfg.steps, cfg.filter.alpha, &cfg.filter);
    debug_assert!(state.check_invariants(cfg).is_ok());
    Ok(loss)
}

fn apply_adam(state: &mut TrainState, lr: &LearningRates, grads: &AttributeGradients) {
    let adam = &mut state.adam;
    adam.t += 1;
    let bc1 = 1.0 - BETA1.powi(adam.t as i32);
    let bc2 = 1.0 - BETA2.powi(adam.t as i32);
    let stride = 8 + state.cloud.feature_dim;

    let mut update = |slot: usize, g: f64, rate: f64, value: &mut f64| {
        let m = &mut adam.first[slot];
        let v = &mut adam.second[slot];
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        if rate != 0.0 {
            *value -= rate * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        }
    };

    for (i, (point, grad)) in state.cloud.points.iter_mut().zip(&grads.points).enumerate() {
        let base = i * stride;
        for a in 0..3 {
            update(base + a, grad.position[a], lr.position, &mut point.position[a]);
            update(base + 3 + a, grad.normal[a], lr.normal, &mut point.normal[a]);
        }
        let (mut k, mut m) = (point.kernel.k(), point.kernel.m());
        update(base + 6, grad.k, lr.k, &mut k);
        update(base + 7, grad.m, lr.m, &mut m);
        for (c, (value, g)) in point.feature.iter_mut().zip(&grad.feature).enumerate() {
            update(base + 8 + c, *g, lr.feature, value);
        }

        // Restore constraints.
        if lr.k != 0.0 || lr.m != 0.0 {
            point.kernel = KernelParams::clamped(k, m);
        }
        if lr.normal != 0.0 {
            let n = point.normal.norm();
            point.normal = if n > 0.0 && n.is_finite() { point.normal / n } else { Vec3::z() };
        }
        for c in point.position.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

/// Supervision plan: 90% of samples uniform in the shell within three grid
/// spacings of the surface, 10% uniform over the unit cube.
pub fn sample_targets<F, R>(oracle: &F, resolution: usize, n: usize, rng: &mut R) -> Vec<Target>
where
    F: Fn(&Vec3) -> f64 + ?Sized,
    R: Rng + ?Sized,
{
    let shell = 3.0 / (resolution - 1) as f64;
    let n_uniform = n / 10;
    let n_shell = n - n_uniform;
    let mut targets = Vec::with_capacity(n);
    let max_draws = 1000 * n_shell.max(1);
    let mut draws = 0;
    while targets.len() < n_shell && draws < max_draws {
        draws += 1;
        let q = Vec3::new(rng.random(), rng.random(), rng.random());
        let sdf = oracle(&q);
        if sdf.abs() <= shell {
            targets.push(Target { query: q, sdf });
        }
    }
    for _ in 0..n_uniform {
        let q = Vec3::new(rng.random(), rng.random(), rng.random());
        targets.push(Target { query: q, sdf: oracle(&q) });
    }
    targets
}

/// Random stream for the supervision draw of `step`, disjoint from the
/// per-query filter streams.
pub fn supervision_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | step as u64);
    rng
}

/// Splats the cloud with no perturbation and extracts the zero level set. The
/// outer layer of the grid is forced positive so the mesh is closed.
pub fn extract_surface(cloud: &PointCloud, resolution: usize, background_sdf: f64) -> Result<(Mesh, SplatGrid, BinIndex)> {
    let (index, grid) = build_grid(cloud, resolution, background_sdf)?;
    let mut values = grid.sdf.clone();
    close_domain_boundary(resolution, &mut values, 0.0, background_sdf);
    let mut mesh = marching_cubes_values(resolution, &values, 0.0)?;
    if cloud.feature_dim > 0 {
        interpolate_vertex_attributes(&mut mesh, &grid)?;
    }
    Ok((mesh, grid, index))
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub cloud: PointCloud,
    pub mesh: Mesh,
    pub loss_history: Vec<f64>,
    pub alpha_history: Vec<f64>,
}

/// Runs `cfg.steps` iterations with fresh supervision each step and extracts
/// the final mesh from the unperturbed field.
pub fn fit<F>(initial: PointCloud, oracle: &F, cfg: &ReconstructionConfig) -> Result<FitResult>
where
    F: Fn(&Vec3) -> f64 + Sync + ?Sized,
{
    cfg.validate()?;
    if initial.is_empty() {
        return Err(Error::invalid("cannot fit an empty point cloud"));
    }
    let cloud = initial.with_kernel(cfg.kernel);
    cloud.validate()?;
    let mut state = TrainState::new(cloud, cfg);
    for s in 0..cfg.steps {
        let mut rng = supervision_rng(cfg.filter.seed, s);
        let mut targets = sample_targets(oracle, cfg.resolution, cfg.supervision_samples, &mut rng);
        let alpha = anneal_alpha(s, cfg.steps, cfg.filter.alpha, &cfg.filter);
        filter_targets(&mut targets, oracle, &LossFilter::from_config(&cfg.filter, alpha, s));
        step(&mut state, cfg, &targets)?;
    }
    let (mesh, _, _) = extract_surface(&state.cloud, cfg.resolution, cfg.background())?;
    Ok(FitResult {
        cloud: state.cloud,
        mesh,
        loss_history: state.loss_history,
        alpha_history: state.alpha_history,
    })
}
