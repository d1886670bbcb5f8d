//! primvol: render, benchmark, gradient-check, fit, distill, invert, and
//! inspect volumetric-primitive scenes.
//!
//! Exit codes: 0 success, 2 usage/input error, 1 internal error. All
//! subcommands honor `--seed` and `--threads`; results are independent of
//! the thread count.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use primvol::accel::build_bvh;
use primvol::autodiff::grad_check;
use primvol::generator::{load_generator, save_generator, GeneratorParams};
use primvol::imageio::{write_pfm, write_png_srgb};
use primvol::mesh::{anchor_primitives, load_mesh, uv_sphere, AnchorSet, GuideMesh};
use primvol::render::{
    render, render_dense_oracle, render_primitive_overlay, RenderOptions,
};
use primvol::scene::{load_scene, save_scene};
use primvol::training::{
    distill, eval_dataset_psnr, fit_scene, invert, make_teacher, render_latent,
    DistillConfig, FitConfig, InvertConfig, MultiViewDataset, TeacherSpec,
};
use primvol::{Camera, Payload, Primitive, PrimitiveSet, Rotation, Vec3};

// ---------------------------------------------------------------------------
// Argument surface

#[derive(Parser)]
#[command(
    name = "primvol",
    version,
    about = "Volumetric-primitive renderer, fitter, and distillation tools"
)]
struct Cli {
    /// Random seed shared by all subcommands.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (falls back to the PRIMVOL_THREADS env var, then all
    /// cores). Results never depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a scene to PNG + PFM (omit --scene for the built-in demo).
    Render(RenderArgs),
    /// Time the primitive renderer against the dense reference integrator.
    Bench(BenchArgs),
    /// Run the finite-difference gradient audit; exits 0 iff it passes.
    Gradcheck(GradcheckArgs),
    /// Generate a procedural multi-view teacher dataset.
    Teacher(TeacherArgs),
    /// Fit primitive payloads and pose deltas to a multi-view dataset.
    Fit(FitArgs),
    /// Train a latent-conditioned generator against a teacher dataset.
    Distill(DistillArgs),
    /// Recover the latent (and refine the generator) for one dataset view.
    Invert(InvertArgs),
    /// Render a color-coded primitive overlay and per-primitive table.
    Inspect(InspectArgs),
}

/// Image size parsed from `WxH`.
#[derive(Debug, Clone, Copy)]
struct Res {
    w: u32,
    h: u32,
}

impl FromStr for Res {
    type Err = String;
    fn from_str(s: &str) -> Result<Res, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
        let parse = |v: &str| {
            v.parse::<u32>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| format!("bad dimension {v:?} in {s:?}"))
        };
        Ok(Res { w: parse(w)?, h: parse(h)? })
    }
}

impl fmt::Display for Res {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.w, self.h)
    }
}

#[derive(Args)]
struct RenderArgs {
    /// Scene file; the built-in demo scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "primvol_out")]
    out: PathBuf,
    #[arg(long, default_value = "256x256")]
    res: Res,
    /// Ray-march step (world units).
    #[arg(long, default_value_t = 0.02)]
    step: f64,
    /// Also run the dense reference integrator and print max|diff|.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Scene file; a 256-primitive sparse demo cloud when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value = "256x256")]
    res: Res,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// Timed frames per renderer (after one warmup frame each).
    #[arg(long, default_value_t = 10)]
    frames: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Scene file; the built-in demo scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value = "32x24")]
    res: Res,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// Finite-difference probes per parameter class.
    #[arg(long, default_value_t = 60)]
    probes: usize,
}

#[derive(Args)]
struct TeacherArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "64x64")]
    res: Res,
    #[arg(long, default_value_t = 0.04)]
    step: f64,
    #[arg(long, default_value_t = 2)]
    latent_dim: usize,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset manifest (manifest.jsonl) to fit against.
    #[arg(long)]
    dataset: PathBuf,
    /// Guide mesh (OBJ); a unit-ish sphere when omitted.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Anchor grid side; the scene gets about this many squared primitives.
    #[arg(long, default_value_t = 32)]
    nprim_grid: u32,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value = "primvol_out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.04)]
    step: f64,
}

#[derive(Args)]
struct DistillArgs {
    /// Dataset manifest with latent codes.
    #[arg(long)]
    dataset: PathBuf,
    /// Guide mesh (OBJ); a unit-ish sphere when omitted.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    nprim_grid: u32,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Checkpoint file: written every iters/10 steps, resumed from when it
    /// already exists.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "primvol_out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.04)]
    step: f64,
}

#[derive(Args)]
struct InvertArgs {
    /// Dataset manifest supplying the target view and camera.
    #[arg(long)]
    dataset: PathBuf,
    /// Trained generator file (from `distill`).
    #[arg(long)]
    ckpt: PathBuf,
    /// Record index of the target view.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Guide mesh (OBJ); a unit-ish sphere when omitted. Must match the mesh
    /// the generator was distilled with.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    nprim_grid: u32,
    /// Total iterations, split 3:2 between the latent-only and joint phases
    /// (default 1200 + 800).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value = "primvol_out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.04)]
    step: f64,
}

#[derive(Args)]
struct InspectArgs {
    /// Scene file; the built-in demo scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value = "primvol_out")]
    out: PathBuf,
    #[arg(long, default_value = "256x256")]
    res: Res,
    #[arg(long, default_value_t = 0.02)]
    step: f64,
}

// ---------------------------------------------------------------------------
// Error classification: usage problems exit 2, everything else exits 1.

#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() {
    let cli = Cli::parse();
    init_threads(cli.threads);
    print_defaults();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            let code =
                if e.chain().any(|c| c.downcast_ref::<UsageError>().is_some()) { 2 } else { 1 };
            std::process::exit(code);
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("PRIMVOL_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        // Ignore the error when a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// The numeric defaults this binary inherits from its reference
/// configuration, printed once so every log records them.
fn print_defaults() {
    eprintln!(
        "primvol defaults: lambda_perc=20 lambda_reg=1e-4 adam_lr=0.001 \
         anchor_grid=32x32 invert_iters=1200+800 seed=42"
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Render(a) => cmd_render(a, cli.seed),
        Cmd::Bench(a) => cmd_bench(a, cli.seed),
        Cmd::Gradcheck(a) => cmd_gradcheck(a, cli.seed),
        Cmd::Teacher(a) => cmd_teacher(a, cli.seed),
        Cmd::Fit(a) => cmd_fit(a, cli.seed),
        Cmd::Distill(a) => cmd_distill(a, cli.seed),
        Cmd::Invert(a) => cmd_invert(a, cli.seed),
        Cmd::Inspect(a) => cmd_inspect(a, cli.seed),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

/// Front-facing camera at distance 3 looking at the origin.
fn default_camera(res: Res) -> Result<Camera> {
    Camera::look_at(
        Vec3::new(0.0, 0.0, -3.0),
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(0.0, -1.0, 0.0),
        res.w as f64,
        res.w,
        res.h,
    )
    .context("building the default camera")
}

fn load_scene_arg(path: &Option<PathBuf>, seed: u64) -> Result<PrimitiveSet> {
    match path {
        Some(p) => {
            load_scene(p).map_err(|e| usage(format!("cannot load scene {}: {e}", p.display())))
        }
        None => Ok(demo_scene(seed)),
    }
}

fn load_mesh_arg(path: &Option<PathBuf>) -> Result<GuideMesh> {
    match path {
        Some(p) => {
            load_mesh(p).map_err(|e| usage(format!("cannot load mesh {}: {e}", p.display())))
        }
        None => Ok(uv_sphere(0.7, 12, 18)),
    }
}

fn load_dataset_arg(path: &Path) -> Result<MultiViewDataset> {
    MultiViewDataset::load(path)
        .map_err(|e| usage(format!("cannot load dataset {}: {e}", path.display())))
}

fn anchors_arg(mesh: &Option<PathBuf>, grid: u32) -> Result<AnchorSet> {
    let mesh = load_mesh_arg(mesh)?;
    anchor_primitives(&mesh, grid).map_err(|e| usage(format!("cannot anchor primitives: {e}")))
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

/// Built-in demo scene: a handful of tinted blocks near the origin.
fn demo_scene(seed: u64) -> PrimitiveSet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6465_6d6f);
    let mut prims = Vec::new();
    for _ in 0..6 {
        let position = Vec3::new(
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
        );
        let axis_angle = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let scale = Vec3::new(
            rng.gen_range(0.15..0.35),
            rng.gen_range(0.15..0.35),
            rng.gen_range(0.15..0.35),
        );
        let m = 3;
        let n = (m as usize).pow(3);
        let mut rgb = Vec::with_capacity(3 * n);
        let mut alpha = Vec::with_capacity(n);
        let tint: [f64; 3] =
            [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
        for _ in 0..n {
            for t in tint {
                rgb.push((t + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
            }
            alpha.push(rng.gen_range(0.4..2.0));
        }
        let payload = Payload::new(m, rgb, alpha).expect("demo payload is valid");
        prims.push(
            Primitive::new(position, Rotation::from_axis_angle(axis_angle), scale, payload)
                .expect("demo primitive is valid"),
        );
    }
    PrimitiveSet::new(prims, [0.05, 0.05, 0.08]).expect("demo scene is non-empty")
}

/// Demo cloud for benchmarking: `n` small primitives in a thin slab, so rays
/// spend most of their span outside any primitive.
fn demo_scene_cloud(seed: u64, n: usize) -> PrimitiveSet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x636c_6f75_64);
    let mut prims = Vec::new();
    for _ in 0..n {
        let position = Vec3::new(
            rng.gen_range(-1.2..1.2),
            rng.gen_range(-1.2..1.2),
            rng.gen_range(-0.15..0.15),
        );
        let scale = Vec3::new(
            rng.gen_range(0.04..0.09),
            rng.gen_range(0.04..0.09),
            rng.gen_range(0.04..0.09),
        );
        let payload = Payload::constant(
            2,
            [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)],
            rng.gen_range(1.0..4.0),
        );
        prims.push(
            Primitive::new(position, Rotation::IDENTITY, scale, payload)
                .expect("cloud primitive is valid"),
        );
    }
    PrimitiveSet::new(prims, [0.0, 0.0, 0.0]).expect("cloud scene is non-empty")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Quaternion to intrinsic Z-Y-X (yaw, pitch, roll) angles in degrees.
fn euler_zyx_degrees(r: &Rotation) -> [f64; 3] {
    let m = r.to_matrix().rows;
    let sp = (-m[2][0]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    let (yaw, roll) = if sp.abs() < 1.0 - 1e-9 {
        (m[1][0].atan2(m[0][0]), m[2][1].atan2(m[2][2]))
    } else {
        // Gimbal lock: fold everything into yaw.
        ((-m[0][1]).atan2(m[1][1]), 0.0)
    };
    [yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees()]
}

// ---------------------------------------------------------------------------
// render

fn cmd_render(args: RenderArgs, seed: u64) -> Result<()> {
    let scene = load_scene_arg(&args.scene, seed)?;
    let camera = default_camera(args.res)?;
    let opts = RenderOptions {
        step: args.step,
        near: 0.5,
        far: 8.0,
        ..RenderOptions::default()
    };
    ensure_out(&args.out)?;

    let bvh = build_bvh(&scene);
    let started = Instant::now();
    let out = render(&camera, &scene, &bvh, &opts)?;
    let secs = started.elapsed().as_secs_f64();

    write_png_srgb(&out.color, &args.out.join("render.png"))?;
    write_pfm(&out.color, &args.out.join("render.pfm"))?;
    let rays = args.res.w as f64 * args.res.h as f64;
    println!("ms/frame {:.3}", secs * 1e3);
    println!("rays/sec {:.0}", rays / secs.max(1e-12));

    if args.oracle {
        let reference = render_dense_oracle(&camera, &scene, &opts)?;
        write_pfm(&reference.color, &args.out.join("oracle.pfm"))?;
        println!("max_abs_diff {:.3e}", max_abs_diff(&out.color.data, &reference.color.data));
    }
    eprintln!("wrote render.png, render.pfm to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn cmd_bench(args: BenchArgs, seed: u64) -> Result<()> {
    if args.frames == 0 {
        return Err(usage("--frames must be >= 1"));
    }
    let scene = match &args.scene {
        Some(p) => {
            load_scene(p).map_err(|e| usage(format!("cannot load scene {}: {e}", p.display())))?
        }
        None => demo_scene_cloud(seed, 256),
    };
    let camera = default_camera(args.res)?;
    let opts = RenderOptions {
        step: args.step,
        near: 1.0,
        far: 6.0,
        ..RenderOptions::default()
    };
    let bvh = build_bvh(&scene);

    // One warmup frame per path, then timed frames.
    render(&camera, &scene, &bvh, &opts)?;
    let mut prim_ms = Vec::with_capacity(args.frames);
    for _ in 0..args.frames {
        let t = Instant::now();
        render(&camera, &scene, &bvh, &opts)?;
        prim_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    render_dense_oracle(&camera, &scene, &opts)?;
    let mut oracle_ms = Vec::with_capacity(args.frames);
    for _ in 0..args.frames {
        let t = Instant::now();
        render_dense_oracle(&camera, &scene, &opts)?;
        oracle_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }

    let prim = median_ms(prim_ms);
    let oracle = median_ms(oracle_ms);
    let speedup = oracle / prim.max(1e-9);
    let rays = args.res.w as f64 * args.res.h as f64;
    println!("[bench]");
    println!("primitives={}", scene.primitives.len());
    println!("resolution={}", args.res);
    println!("step={}", args.step);
    println!("frames={}", args.frames);
    println!("prim_ms_median={prim:.3}");
    println!("oracle_ms_median={oracle:.3}");
    println!("speedup={speedup:.2}");
    println!("rays_per_sec={:.0}", rays / (prim / 1e3).max(1e-12));
    println!("[/bench]");
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck(args: GradcheckArgs, seed: u64) -> Result<()> {
    if args.probes == 0 {
        return Err(usage("--probes must be >= 1"));
    }
    let scene = load_scene_arg(&args.scene, seed)?;
    let camera = default_camera(args.res)?;
    let opts = RenderOptions {
        step: args.step,
        near: 1.0,
        far: 6.0,
        ..RenderOptions::default()
    };
    let report = grad_check(&scene, &camera, &opts, args.probes, 1e-4, seed)?;
    println!("{}", report.to_json());
    if report.pass {
        Ok(())
    } else {
        anyhow::bail!("gradient audit failed; see the report above")
    }
}

// ---------------------------------------------------------------------------
// teacher

fn cmd_teacher(args: TeacherArgs, seed: u64) -> Result<()> {
    let spec = TeacherSpec {
        step: args.step,
        ..TeacherSpec::new(
            args.latent_dim,
            args.samples,
            args.views,
            args.res.w,
            args.res.h,
            seed,
        )
    };
    let started = Instant::now();
    let dataset = make_teacher(&spec, &args.out)?;
    println!(
        "wrote {} views ({} scenes x {} views) at {} to {}",
        dataset.len(),
        args.samples,
        args.views,
        args.res,
        dataset.manifest_path().display()
    );
    eprintln!("took {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

/// Mean PSNR of a fitted scene over dataset views.
fn scene_psnr(
    scene: &PrimitiveSet,
    dataset: &MultiViewDataset,
    opts: &RenderOptions,
) -> Result<f64> {
    let bvh = build_bvh(scene);
    let mut sum = 0.0;
    for i in 0..dataset.len() {
        let camera = dataset.camera(i)?;
        let out = render(&camera, scene, &bvh, opts)?;
        sum += primvol::geom::psnr(&out.color, &dataset.load_image(i)?)?;
    }
    Ok(sum / dataset.len() as f64)
}

fn cmd_fit(args: FitArgs, seed: u64) -> Result<()> {
    let _ = seed; // fitting is deterministic: round-robin views, no sampling
    let dataset = load_dataset_arg(&args.dataset)?;
    let anchors = anchors_arg(&args.mesh, args.nprim_grid)?;
    ensure_out(&args.out)?;

    let background = dataset.background().unwrap_or([0.0, 0.0, 0.0]);
    let config = FitConfig {
        steps: args.iters,
        render: RenderOptions { step: args.step, ..RenderOptions::default() },
        background,
        log_every: (args.iters / 100).max(1),
        print_progress: true,
        ..FitConfig::default()
    };
    eprintln!(
        "fitting {} primitives to {} views at {}x{}",
        anchors.len(),
        dataset.len(),
        dataset.width(),
        dataset.height()
    );
    let report = fit_scene(&dataset, &anchors, None, &config)?;

    save_scene(&report.scene, &args.out.join("fitted.scene"))?;
    let log_json: Vec<serde_json::Value> = report
        .log
        .iter()
        .map(|e| {
            serde_json::json!({
                "step": e.step, "view": e.view, "total": e.total, "rec": e.rec,
                "perc": e.perc, "vol": e.vol, "wall_ms": e.wall_ms,
            })
        })
        .collect();
    std::fs::write(
        args.out.join("fit_log.json"),
        serde_json::to_string_pretty(&log_json)?,
    )?;

    let eval_opts = RenderOptions {
        step: args.step,
        background: Some(background),
        ..RenderOptions::default()
    };
    let psnr = scene_psnr(&report.scene, &dataset, &eval_opts)?;
    println!("[fit]");
    println!("steps={}", args.iters);
    println!("final_total={:.6}", report.log.last().map(|e| e.total).unwrap_or(f64::NAN));
    println!("train_psnr_db={psnr:.2}");
    println!("diverged_at={:?}", report.diverged_at);
    println!("[/fit]");
    eprintln!("wrote fitted.scene, fit_log.json to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// distill

fn cmd_distill(args: DistillArgs, seed: u64) -> Result<()> {
    let dataset = load_dataset_arg(&args.dataset)?;
    if !dataset.has_latents() {
        return Err(usage("distill needs a dataset with latent codes (see `teacher`)"));
    }
    let anchors = anchors_arg(&args.mesh, args.nprim_grid)?;
    ensure_out(&args.out)?;

    let d_w = dataset.records[0].w.as_ref().expect("checked above").len();
    let params = GeneratorParams::new(d_w, anchors.len(), 4, &[64, 64], seed)
        .map_err(|e| usage(format!("cannot build generator: {e}")))?;

    let background = dataset.background().unwrap_or([0.0, 0.0, 0.0]);
    let mut config = DistillConfig {
        steps: args.iters,
        render: RenderOptions { step: args.step, ..RenderOptions::default() },
        background,
        seed,
        log_every: (args.iters / 200).max(1),
        print_progress: true,
        ..DistillConfig::default()
    };
    if let Some(ckpt) = &args.ckpt {
        config.checkpoint_path = Some(ckpt.clone());
        config.checkpoint_every = (args.iters / 10).max(1);
        if ckpt.exists() {
            eprintln!("resuming from {}", ckpt.display());
            config.resume_from = Some(ckpt.clone());
        }
    }

    eprintln!(
        "distilling {} primitives / latent dim {} against {} views",
        anchors.len(),
        d_w,
        dataset.len()
    );
    let report = distill(&dataset, &anchors, params, &config)?;

    let gen_path = args.out.join("generator.bin");
    save_generator(&gen_path, &report.params)?;
    let log_json: Vec<serde_json::Value> = report
        .log
        .iter()
        .map(|e| {
            serde_json::json!({
                "step": e.step, "total": e.total, "rec": e.rec, "perc": e.perc,
                "vol": e.vol, "adv": e.adv, "wall_ms": e.wall_ms,
            })
        })
        .collect();
    std::fs::write(
        args.out.join("distill_log.json"),
        serde_json::to_string_pretty(&log_json)?,
    )?;

    // Quick train-set evaluation on a bounded subset.
    let mut eval_ds = dataset.clone();
    eval_ds.records.truncate(32);
    let psnr = eval_dataset_psnr(&report.params, &anchors, &eval_ds, &config.render, background)?;
    println!("[distill]");
    println!("steps={}", args.iters);
    println!("final_total={:.6}", report.log.last().map(|e| e.total).unwrap_or(f64::NAN));
    println!("eval_psnr_db={psnr:.2}");
    println!("diverged_at={:?}", report.diverged_at);
    println!("[/distill]");
    eprintln!("wrote generator.bin, distill_log.json to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// invert

fn cmd_invert(args: InvertArgs, seed: u64) -> Result<()> {
    let _ = seed; // inversion is deterministic given the generator and target
    let dataset = load_dataset_arg(&args.dataset)?;
    let generator = load_generator(&args.ckpt)
        .map_err(|e| usage(format!("cannot load generator {}: {e}", args.ckpt.display())))?;
    let anchors = anchors_arg(&args.mesh, args.nprim_grid)?;
    if anchors.len() != generator.n_prim {
        return Err(usage(format!(
            "generator drives {} primitives but --mesh/--nprim-grid yield {}; \
             pass the same mesh and grid used for distillation",
            generator.n_prim,
            anchors.len()
        )));
    }
    if args.index >= dataset.len() {
        return Err(usage(format!(
            "--index {} out of range ({} records)",
            args.index,
            dataset.len()
        )));
    }
    ensure_out(&args.out)?;

    let target = dataset.load_image(args.index)?;
    let camera = dataset.camera(args.index)?;
    let background = dataset.background().unwrap_or([0.0, 0.0, 0.0]);

    let (phase1, phase2) = match args.iters {
        None => (1200, 800),
        Some(n) => {
            let p1 = n * 3 / 5;
            (p1, n - p1)
        }
    };
    let config = InvertConfig {
        phase1_iters: phase1,
        phase2_iters: phase2,
        render: RenderOptions { step: args.step, ..RenderOptions::default() },
        background,
        log_every: ((phase1 + phase2) / 100).max(1),
        print_progress: true,
        ..InvertConfig::default()
    };
    eprintln!("inverting view {} over {phase1}+{phase2} iterations", args.index);
    let report = invert(&target, &camera, &generator, &anchors, &config)?;

    let recon = render_latent(
        &report.params,
        &anchors,
        &report.w,
        &camera,
        &config.render,
        background,
    )?;
    let psnr = primvol::geom::psnr(&recon, &target)?;
    write_png_srgb(&target, &args.out.join("target.png"))?;
    write_png_srgb(&recon, &args.out.join("inverted.png"))?;
    std::fs::write(
        args.out.join("inverted.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "w": report.w,
            "best_loss": report.best_loss,
            "best_step": report.best_step,
            "psnr_db": psnr,
        }))?,
    )?;
    println!("[invert]");
    println!("best_loss={:.6}", report.best_loss);
    println!("best_step={}", report.best_step);
    println!("psnr_db={psnr:.2}");
    println!("[/invert]");
    eprintln!("wrote target.png, inverted.png, inverted.json to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect

fn cmd_inspect(args: InspectArgs, seed: u64) -> Result<()> {
    let scene = load_scene_arg(&args.scene, seed)?;
    let camera = default_camera(args.res)?;
    let opts = RenderOptions {
        step: args.step,
        near: 0.5,
        far: 8.0,
        ..RenderOptions::default()
    };
    ensure_out(&args.out)?;

    let bvh = build_bvh(&scene);
    let overlay = render_primitive_overlay(&camera, &scene, &bvh, &opts)?;
    write_png_srgb(&overlay.color, &args.out.join("overlay.png"))?;

    println!(
        "{:>5}  {:>24}  {:>27}  {:>24}",
        "index", "position (x y z)", "euler zyx (deg)", "scale (x y z)"
    );
    for (k, prim) in scene.primitives.iter().enumerate() {
        let e = euler_zyx_degrees(&prim.rotation);
        println!(
            "{k:>5}  {:>7.3} {:>7.3} {:>7.3}  {:>8.2} {:>8.2} {:>8.2}  {:>7.3} {:>7.3} {:>7.3}",
            prim.position.x,
            prim.position.y,
            prim.position.z,
            e[0],
            e[1],
            e[2],
            prim.scale.x,
            prim.scale.y,
            prim.scale.z,
        );
    }
    eprintln!("wrote overlay.png to {}", args.out.display());
    Ok(())
}
