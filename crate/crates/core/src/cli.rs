//! The `imls` command line.
//!
//! Exit codes: 0 on success, 1 when a command fails (bad input, failed check),
//! 2 on usage errors. Diagnostics go to standard error; tables and CSV
//! written without `--out` go to standard output.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{layered_config, read_config_file};
use crate::error::{Error, Result};
use crate::field::PointCloud;
use crate::gradcheck::run_all;
use crate::io::{
    read_mesh, read_point_cloud, write_csv, write_grid_dump, write_loss_history, write_mesh, write_point_cloud,
    MeshFormat,
};
use crate::kernel::{KernelKind, KernelParams};
use crate::metrics::{composite_loss, dssim, l1, mse, one_sided_distance, psnr, ssim, ImageBuffer, PointIndex};
use crate::optimize::{extract_surface, fit, LossKind, ReconstructionConfig};
use crate::shapes::{sample_shape, ShapeKind};
use crate::splat::default_background_sdf;
use crate::Vec3;

#[derive(Parser, Debug)]
#[command(name = "imls", version, about = "Compact-kernel IMLS surface reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize a point cloud against its own tangent planes and extract a mesh.
    Reconstruct(ReconstructArgs),
    /// Splat a point cloud once and extract its zero level set.
    Extract(ExtractArgs),
    /// Compare two meshes (and optionally two images).
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Reconstruct an analytic shape with each kernel and report Chamfer and time.
    Bench(BenchArgs),
    /// Write a sampled analytic shape as a point cloud.
    Sample(SampleArgs),
    /// Write 1-D profiles of both kernels as CSV.
    KernelProfile(KernelProfileArgs),
}

/// Reconstruction settings shared by the file and the command line.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// `key = value` file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_position: Option<f64>,
    #[arg(long)]
    lr_normal: Option<f64>,
    #[arg(long)]
    lr_k: Option<f64>,
    #[arg(long)]
    lr_m: Option<f64>,
    #[arg(long)]
    lr_feature: Option<f64>,
    /// Initial noise scale of the stochastic filter.
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    lambda_lap: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    anneal_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, action = ArgAction::Set)]
    dim_corrected: Option<bool>,
    #[arg(long)]
    supervision_samples: Option<usize>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    kernel: Option<KernelKind>,
    /// Value outside the supports, or `auto` for two voxel spacings.
    #[arg(long)]
    background_sdf: Option<String>,
    #[arg(long, action = ArgAction::Set)]
    reset_moments_after_anneal: Option<bool>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push((key.to_string(), v));
            }
        };
        push("resolution", self.resolution.map(|v| v.to_string()));
        push("steps", self.steps.map(|v| v.to_string()));
        push("lr_position", self.lr_position.map(|v| v.to_string()));
        push("lr_normal", self.lr_normal.map(|v| v.to_string()));
        push("lr_k", self.lr_k.map(|v| v.to_string()));
        push("lr_m", self.lr_m.map(|v| v.to_string()));
        push("lr_feature", self.lr_feature.map(|v| v.to_string()));
        push("alpha0", self.alpha0.map(|v| v.to_string()));
        push("lambda_lap", self.lambda_lap.map(|v| v.to_string()));
        push("mc_samples", self.mc_samples.map(|v| v.to_string()));
        push("anneal_fraction", self.anneal_fraction.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("dim_corrected", self.dim_corrected.map(|v| v.to_string()));
        push("supervision_samples", self.supervision_samples.map(|v| v.to_string()));
        push("loss", self.loss.map(|v| v.to_string()));
        push("kernel", self.kernel.map(|v| v.to_string()));
        push("background_sdf", self.background_sdf.clone());
        push(
            "reset_moments_after_anneal",
            self.reset_moments_after_anneal.map(|v| v.to_string()),
        );
        out
    }

    fn resolve(&self, base: ReconstructionConfig) -> Result<ReconstructionConfig> {
        let file = match &self.config {
            Some(path) => read_config_file(path)?,
            None => Vec::new(),
        };
        layered_config(base, &file, &self.overrides())
    }
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// Oriented point cloud (.ply, .xyz).
    #[arg(long)]
    input: PathBuf,
    /// Output mesh (.obj or .ply).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Per-step loss and noise scale as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Optimized point cloud as binary PLY.
    #[arg(long)]
    out_cloud: Option<PathBuf>,
    /// Final SDF grid in the binary dump format.
    #[arg(long)]
    dump_grid: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = KernelKind::Compact)]
    kernel: KernelKind,
    #[arg(long)]
    background_sdf: Option<f64>,
    #[arg(long)]
    dump_grid: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    mesh_a: PathBuf,
    #[arg(long)]
    mesh_b: PathBuf,
    /// Surface samples drawn from each mesh.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, requires = "image_b")]
    image_a: Option<PathBuf>,
    #[arg(long, requires = "image_a")]
    image_b: Option<PathBuf>,
    /// D-SSIM weight of the composite image loss.
    #[arg(long, default_value_t = 0.2)]
    lambda_mix: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchKernel {
    Compact,
    Exponential,
    Both,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchKernel::Both)]
    kernel: BenchKernel,
    #[arg(long, default_value_t = ShapeKind::Torus)]
    shape: ShapeKind,
    #[arg(long, default_value_t = 48)]
    resolution: usize,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Points sampled on the shape.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0.005)]
    noise_pos: f64,
    #[arg(long, default_value_t = 5.0)]
    noise_normal_deg: f64,
    /// Seeds the point sample, the filter and the evaluation samples.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Surface samples for the Chamfer distance.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Further reconstruction settings; the flags above take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    kind: ShapeKind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    noise_pos: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_normal_deg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct KernelProfileArgs {
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    #[arg(long, default_value_t = 1.0)]
    m: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Reconstruct(a) => reconstruct(a),
        Command::Extract(a) => extract(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::Sample(a) => sample(a),
        Command::KernelProfile(a) => kernel_profile(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Signed distance to the tangent plane of the nearest input point.
fn tangent_plane_oracle<'a>(cloud: &'a PointCloud, index: &'a PointIndex<'a>) -> impl Fn(&Vec3) -> f64 + Sync + 'a {
    move |q| match index.nearest(q, None) {
        Some((i, _)) => {
            let p = &cloud.points[i];
            (q - p.position).dot(&p.normal)
        }
        None => 0.0,
    }
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let cfg = a.train.resolve(ReconstructionConfig::default())?;
    let format = MeshFormat::from_path(&a.out)?;
    let cloud = read_point_cloud(&a.input)?;
    let positions: Vec<Vec3> = cloud.points.iter().map(|p| p.position).collect();
    let index = PointIndex::new(&positions)?;
    let oracle = tangent_plane_oracle(&cloud, &index);

    let start = Instant::now();
    let result = fit(cloud.clone(), &oracle, &cfg)?;
    write_mesh(&result.mesh, &a.out, format)?;
    if let Some(path) = &a.loss_csv {
        write_loss_history(path, &result.loss_history, &result.alpha_history)?;
    }
    if let Some(path) = &a.out_cloud {
        write_point_cloud(&result.cloud, path)?;
    }
    if let Some(path) = &a.dump_grid {
        let (_, grid, _) = extract_surface(&result.cloud, cfg.resolution, cfg.background())?;
        write_grid_dump(path, cfg.resolution, &grid.sdf)?;
    }
    eprintln!(
        "{} steps, final loss {}, {} vertices, {} triangles, {:.1} s",
        cfg.steps,
        result.loss_history.last().copied().unwrap_or(f64::NAN),
        result.mesh.vertices.len(),
        result.mesh.triangles.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    if a.resolution < 2 {
        return Err(Error::invalid("resolution must be >= 2"));
    }
    let format = MeshFormat::from_path(&a.out)?;
    let cloud = read_point_cloud(&a.input)?.with_kernel(a.kernel);
    let background = a.background_sdf.unwrap_or_else(|| default_background_sdf(a.resolution));
    let (mesh, grid, _) = extract_surface(&cloud, a.resolution, background)?;
    write_mesh(&mesh, &a.out, format)?;
    if let Some(path) = &a.dump_grid {
        write_grid_dump(path, a.resolution, &grid.sdf)?;
    }
    eprintln!(
        "{} vertices, {} triangles, watertight: {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        mesh.is_watertight()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(Error::invalid("samples must be >= 1"));
    }
    let mesh_a = read_mesh(&a.mesh_a)?;
    let mesh_b = read_mesh(&a.mesh_b)?;
    for (mesh, path) in [(&mesh_a, &a.mesh_a), (&mesh_b, &a.mesh_b)] {
        if mesh.is_empty() {
            return Err(Error::invalid(format!("{} has no triangles", path.display())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let pa = mesh_a.sample_surface(a.samples, &mut rng);
    let pb = mesh_b.sample_surface(a.samples, &mut rng);
    let accuracy = one_sided_distance(&pa, &pb)?;
    let completeness = one_sided_distance(&pb, &pa)?;

    let mut rows = vec![
        ("accuracy (a->b)", accuracy),
        ("completeness (b->a)", completeness),
        ("chamfer", 0.5 * (accuracy + completeness)),
    ];
    if let (Some(ia), Some(ib)) = (&a.image_a, &a.image_b) {
        let img_a = ImageBuffer::from_png(ia)?;
        let img_b = ImageBuffer::from_png(ib)?;
        rows.push(("l1", l1(&img_a, &img_b)?));
        rows.push(("mse", mse(&img_a, &img_b)?));
        rows.push(("psnr", psnr(&img_a, &img_b)?));
        rows.push(("ssim", ssim(&img_a, &img_b)?));
        rows.push(("dssim", dssim(&img_a, &img_b)?));
        rows.push(("composite", composite_loss(&img_a, &img_b, a.lambda_mix)?));
    }
    println!("{:<22}value", "metric");
    for (name, value) in rows {
        println!("{name:<22}{value}");
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = run_all(a.seed)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{status} {:<40} max rel error {:.3e} (tol {:.0e}, {} checked, {} skipped)",
            r.name, r.max_rel_error, r.tolerance, r.checked, r.skipped
        );
    }
    if failed > 0 {
        return Err(Error::invalid(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    Ok(())
}

/// One bench measurement.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub shape: ShapeKind,
    pub kernel: KernelKind,
    pub resolution: usize,
    pub steps: usize,
    pub chamfer: f64,
    pub seconds: f64,
}

pub const BENCH_HEADER: [&str; 6] = ["shape", "kernel", "resolution", "steps", "chamfer", "seconds"];

impl BenchRow {
    fn to_record(&self) -> Vec<String> {
        vec![
            self.shape.to_string(),
            self.kernel.to_string(),
            self.resolution.to_string(),
            self.steps.to_string(),
            self.chamfer.to_string(),
            self.seconds.to_string(),
        ]
    }
}

/// Fits `cloud` against the analytic SDF of `shape` and measures the Chamfer
/// distance of the result to `truth`.
pub fn bench_run(
    shape: ShapeKind,
    cloud: &PointCloud,
    truth: &[Vec3],
    cfg: &ReconstructionConfig,
    eval_samples: usize,
    eval_seed: u64,
) -> Result<BenchRow> {
    let start = Instant::now();
    let result = fit(cloud.clone(), &|q: &Vec3| shape.sdf(q), cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    if result.mesh.is_empty() {
        return Err(Error::invalid(format!("{} reconstruction produced no surface", cfg.kernel)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let samples = result.mesh.sample_surface(eval_samples, &mut rng);
    let chamfer = 0.5 * (one_sided_distance(&samples, truth)? + one_sided_distance(truth, &samples)?);
    Ok(BenchRow {
        shape,
        kernel: cfg.kernel,
        resolution: cfg.resolution,
        steps: cfg.steps,
        chamfer,
        seconds,
    })
}

fn bench(a: BenchArgs) -> Result<()> {
    let flags = TrainFlags {
        config: a.config.clone(),
        resolution: Some(a.resolution),
        steps: Some(a.steps),
        seed: Some(a.seed),
        ..TrainFlags::default()
    };
    let base = flags.resolve(ReconstructionConfig::default())?;
    if a.samples == 0 {
        return Err(Error::invalid("samples must be >= 1"));
    }
    let kernels: &[KernelKind] = match a.kernel {
        BenchKernel::Compact => &[KernelKind::Compact],
        BenchKernel::Exponential => &[KernelKind::Exponential],
        BenchKernel::Both => &[KernelKind::Compact, KernelKind::Exponential],
    };
    let cloud = sample_shape(a.shape, a.n, a.noise_pos, a.noise_normal_deg, a.seed)?;
    let truth = a.shape.surface_points(a.samples, a.seed.wrapping_add(1));
    let mut rows = Vec::new();
    for &kernel in kernels {
        let cfg = ReconstructionConfig { kernel, ..base.clone() };
        let row = bench_run(a.shape, &cloud, &truth, &cfg, a.samples, a.seed.wrapping_add(2))?;
        eprintln!("{} {}: chamfer {:.5} in {:.1} s", row.shape, row.kernel, row.chamfer, row.seconds);
        rows.push(row.to_record());
    }
    match &a.out {
        Some(path) => write_csv(path, &BENCH_HEADER, &rows)?,
        None => {
            println!("{}", BENCH_HEADER.join(","));
            for r in &rows {
                println!("{}", r.join(","));
            }
        }
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let cloud = sample_shape(a.kind, a.n, a.noise_pos, a.noise_normal_deg, a.seed)?;
    write_point_cloud(&cloud, &a.out)?;
    eprintln!("wrote {} points to {}", cloud.len(), a.out.display());
    Ok(())
}

/// `(s, compact, exponential)` at `s = i·m·k/100` for `i = 0..=150`.
pub fn kernel_profile_rows(params: &KernelParams) -> Vec<[f64; 3]> {
    let support = params.m() * params.k();
    (0..=150)
        .map(|i| {
            let s = i as f64 * support / 100.0;
            [
                s,
                KernelKind::Compact.weight(s, params),
                KernelKind::Exponential.weight(s, params),
            ]
        })
        .collect()
}

fn kernel_profile(a: KernelProfileArgs) -> Result<()> {
    let params = KernelParams::new(a.k, a.m)?;
    let rows: Vec<Vec<String>> = kernel_profile_rows(&params)
        .iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect())
        .collect();
    write_csv(&a.out, &["s", "compact", "exponential"], &rows)
}
