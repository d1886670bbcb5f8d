//! Direct scene fitting: Adam on the payloads and pose deltas of a
//! fixed-count primitive set, minimizing the composite loss over a set of
//! posed target views.
//!
//! Views are visited round-robin (no randomness), gradients flow through the
//! renderer's backward pass, and the pose parameters use the same
//! delta-chains as the generator: `t = t_hat + dt`, `R = R_hat exp(dr)`,
//! `s = max(s_hat + ds, floor)`.

use std::time::Instant;

use crate::accel::build_bvh;
use crate::autodiff::backward;
use crate::geom::{so3_right_jacobian, Camera, ImageBuffer, Vec3};
use crate::mesh::AnchorSet;
use crate::render::{render, RenderOptions};
use crate::scene::{apply_deltas, compose, DeltaSet, Payload, PrimitiveSet, SCALE_FLOOR};

use super::losses::total_loss;
use super::optim::{Adam, AdamConfig};
use super::teacher::MultiViewDataset;
use super::{LossWeights, TrainError};

/// Knobs of a fitting run.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Optimization steps (one view per step, round-robin).
    pub steps: usize,
    /// Optimizer settings; the default learning rate is 0.001.
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Renderer settings for both forward and backward; the tape is always
    /// recorded internally.
    pub render: RenderOptions,
    /// Payload grid resolution when initializing from scratch.
    pub payload_m: u32,
    /// Initial node color when initializing from scratch.
    pub init_rgb: [f64; 3],
    /// Initial node density when initializing from scratch.
    pub init_alpha: f64,
    /// Scene background composited behind the primitives.
    pub background: [f64; 3],
    /// Keep every n-th log entry (1 = all).
    pub log_every: usize,
    /// Mirror log entries to stderr while running.
    pub print_progress: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 500,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            render: RenderOptions::default(),
            payload_m: 4,
            init_rgb: [0.5, 0.5, 0.5],
            init_alpha: 0.1,
            background: [0.0, 0.0, 0.0],
            log_every: 1,
            print_progress: false,
        }
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy)]
pub struct FitLogEntry {
    pub step: usize,
    /// View index the step was computed on.
    pub view: usize,
    pub total: f64,
    pub rec: f64,
    pub perc: f64,
    pub vol: f64,
    pub wall_ms: f64,
}

/// Result of a fitting run: the final scene and the loss trace.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub scene: PrimitiveSet,
    pub log: Vec<FitLogEntry>,
    /// Step at which a non-finite loss aborted the run, if any. The returned
    /// scene then holds the last finite iterate.
    pub diverged_at: Option<usize>,
}

impl FitReport {
    /// Mean total loss over consecutive non-overlapping windows of
    /// `window` logged steps (trailing partial window dropped).
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        assert!(window > 0);
        self.log
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.iter().map(|e| e.total).sum::<f64>() / window as f64)
            .collect()
    }

    /// Check that windowed mean losses never increase by more than
    /// `slack` (relative), e.g. `window = 100, slack = 0.05`.
    pub fn check_windows_non_increasing(&self, window: usize, slack: f64) -> Result<(), String> {
        let means = self.window_means(window);
        for (i, pair) in means.windows(2).enumerate() {
            if pair[1] > pair[0] * (1.0 + slack) {
                return Err(format!(
                    "window {} mean {} exceeds window {} mean {} by more than {}%",
                    i + 1,
                    pair[1],
                    i,
                    pair[0],
                    slack * 100.0
                ));
            }
        }
        Ok(())
    }
}

/// Flat parameter layout over `n` primitives with `node` grid nodes each:
/// `[rgb | alpha | dt | dr | ds]`.
struct Layout {
    n: usize,
    node: usize,
    off_alpha: usize,
    off_dt: usize,
    off_dr: usize,
    off_ds: usize,
    total: usize,
}

impl Layout {
    fn new(n: usize, node: usize) -> Layout {
        let off_alpha = 3 * node * n;
        let off_dt = off_alpha + node * n;
        let off_dr = off_dt + 3 * n;
        let off_ds = off_dr + 3 * n;
        Layout { n, node, off_alpha, off_dt, off_dr, off_ds, total: off_ds + 3 * n }
    }

    fn rgb(&self, k: usize) -> std::ops::Range<usize> {
        3 * self.node * k..3 * self.node * (k + 1)
    }

    fn alpha(&self, k: usize) -> std::ops::Range<usize> {
        self.off_alpha + self.node * k..self.off_alpha + self.node * (k + 1)
    }

    fn vec3(&self, base: usize, k: usize) -> std::ops::Range<usize> {
        base + 3 * k..base + 3 * (k + 1)
    }
}

fn read_vec3(flat: &[f64], r: std::ops::Range<usize>) -> Vec3 {
    Vec3::new(flat[r.start], flat[r.start + 1], flat[r.start + 2])
}

fn write_vec3(flat: &mut [f64], r: std::ops::Range<usize>, v: Vec3) {
    flat[r.start] = v.x;
    flat[r.start + 1] = v.y;
    flat[r.start + 2] = v.z;
}

/// Fit against in-memory targets. `targets[i]` is the interleaved rgb image
/// seen from `cameras[i]`; all views share one resolution.
pub fn fit_scene_views(
    cameras: &[Camera],
    targets: &[Vec<f64>],
    anchors: &AnchorSet,
    init: Option<(Vec<Payload>, DeltaSet)>,
    config: &FitConfig,
) -> Result<FitReport, TrainError> {
    if cameras.len() != targets.len() || cameras.len() < 2 {
        return Err(TrainError::Invalid(format!(
            "fit needs >= 2 posed views, got {} cameras / {} targets",
            cameras.len(),
            targets.len()
        )));
    }
    let (w, h) = (cameras[0].width, cameras[0].height);
    for (i, (cam, img)) in cameras.iter().zip(targets).enumerate() {
        if (cam.width, cam.height) != (w, h) {
            return Err(TrainError::Invalid(format!("view {i} has a different resolution")));
        }
        if img.len() != 3 * (w as usize) * (h as usize) {
            return Err(TrainError::Shape(format!(
                "view {i}: target has {} values, camera needs {}",
                img.len(),
                3 * w * h
            )));
        }
    }
    if config.steps == 0 {
        return Err(TrainError::Invalid("fit needs at least one step".into()));
    }
    if config.log_every == 0 {
        return Err(TrainError::Invalid("log_every must be >= 1".into()));
    }

    // Initial payloads and deltas.
    let n = anchors.len();
    let (payloads, mut deltas) = match init {
        Some((p, d)) => {
            if p.len() != n || d.dt.len() != n {
                return Err(TrainError::Invalid(format!(
                    "init holds {} payloads / {} deltas for {} anchors",
                    p.len(),
                    d.dt.len(),
                    n
                )));
            }
            (p, d)
        }
        None => (
            vec![Payload::constant(config.payload_m, config.init_rgb, config.init_alpha); n],
            DeltaSet::zeros(n),
        ),
    };
    let m = payloads[0].m();
    if payloads.iter().any(|p| p.m() != m) {
        return Err(TrainError::Invalid("payload grids must share one resolution".into()));
    }
    let layout = Layout::new(n, (m as usize).pow(3));

    // Flat parameter vector is the single source of truth.
    let mut flat = vec![0.0; layout.total];
    for (k, p) in payloads.iter().enumerate() {
        flat[layout.rgb(k)].copy_from_slice(&p.rgb);
        flat[layout.alpha(k)].copy_from_slice(&p.alpha);
        write_vec3(&mut flat, layout.vec3(layout.off_dt, k), deltas.dt[k]);
        write_vec3(&mut flat, layout.vec3(layout.off_dr, k), deltas.dr[k]);
        write_vec3(&mut flat, layout.vec3(layout.off_ds, k), deltas.ds[k]);
    }

    let (mut scene, _) = compose(anchors, &deltas, payloads, config.background)?;

    let mut opts = config.render.clone();
    opts.record_tape = true;
    opts.background = Some(config.background);

    let mut adam = Adam::new(layout.total, config.adam);
    let mut log = Vec::new();
    let mut diverged_at = None;
    let started = Instant::now();

    for step in 0..config.steps {
        let view = step % cameras.len();

        // Scatter parameters into the scene.
        for k in 0..layout.n {
            let p = &mut scene.primitives[k].payload;
            p.rgb.copy_from_slice(&flat[layout.rgb(k)]);
            p.alpha.copy_from_slice(&flat[layout.alpha(k)]);
            deltas.dt[k] = read_vec3(&flat, layout.vec3(layout.off_dt, k));
            deltas.dr[k] = read_vec3(&flat, layout.vec3(layout.off_dr, k));
            deltas.ds[k] = read_vec3(&flat, layout.vec3(layout.off_ds, k));
        }
        apply_deltas(&mut scene, anchors, &deltas)?;

        // Forward, loss, backward.
        let bvh = build_bvh(&scene);
        let out = render(&cameras[view], &scene, &bvh, &opts)?;
        let (breakdown, d_img, d_scale) = total_loss(
            &out.color.data,
            &targets[view],
            w as usize,
            h as usize,
            &scene,
            &config.weights,
            None,
        )?;
        if !breakdown.total.is_finite() {
            diverged_at = Some(step);
            break;
        }
        let tape = out.tape.as_ref().expect("tape recording was enabled");
        let d_img = ImageBuffer::from_data(out.color.width, out.color.height, 3, d_img)?;
        let mut grads = backward(tape, &scene, &d_img)?;
        for (g, extra) in grads.scale.iter_mut().zip(&d_scale) {
            *g += *extra;
        }

        // Chain world-pose gradients back to the deltas and assemble the
        // flat gradient.
        let mut g_flat = vec![0.0; layout.total];
        for k in 0..layout.n {
            g_flat[layout.rgb(k)].copy_from_slice(&grads.rgb[k]);
            g_flat[layout.alpha(k)].copy_from_slice(&grads.alpha[k]);
            write_vec3(&mut g_flat, layout.vec3(layout.off_dt, k), grads.position[k]);
            let d_dr = so3_right_jacobian(deltas.dr[k]).transpose().mul_vec(grads.rotation[k]);
            write_vec3(&mut g_flat, layout.vec3(layout.off_dr, k), d_dr);
            let composed = anchors.s_hat + deltas.ds[k];
            let mut d_ds = grads.scale[k];
            if composed.x <= SCALE_FLOOR {
                d_ds.x = 0.0;
            }
            if composed.y <= SCALE_FLOOR {
                d_ds.y = 0.0;
            }
            if composed.z <= SCALE_FLOOR {
                d_ds.z = 0.0;
            }
            write_vec3(&mut g_flat, layout.vec3(layout.off_ds, k), d_ds);
        }

        adam.step(&mut flat, &g_flat)?;
        project(&mut flat, &layout);

        if step % config.log_every == 0 || step + 1 == config.steps {
            let entry = FitLogEntry {
                step,
                view,
                total: breakdown.total,
                rec: breakdown.rec,
                perc: breakdown.perc,
                vol: breakdown.vol,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            if config.print_progress {
                eprintln!(
                    "fit step {:>6} view {:>3} total {:.6} rec {:.6} perc {:.6} vol {:.6}",
                    entry.step, entry.view, entry.total, entry.rec, entry.perc, entry.vol
                );
            }
            log.push(entry);
        }
    }

    // Materialize the final iterate (or the last finite one on divergence).
    for k in 0..layout.n {
        let p = &mut scene.primitives[k].payload;
        p.rgb.copy_from_slice(&flat[layout.rgb(k)]);
        p.alpha.copy_from_slice(&flat[layout.alpha(k)]);
        deltas.dt[k] = read_vec3(&flat, layout.vec3(layout.off_dt, k));
        deltas.dr[k] = read_vec3(&flat, layout.vec3(layout.off_dr, k));
        deltas.ds[k] = read_vec3(&flat, layout.vec3(layout.off_ds, k));
    }
    apply_deltas(&mut scene, anchors, &deltas)?;

    Ok(FitReport { scene, log, diverged_at })
}

/// Keep parameters inside their domains: colors in [0,1], densities
/// non-negative, rotation deltas below the exponential map's cut.
fn project(flat: &mut [f64], layout: &Layout) {
    for v in &mut flat[..layout.off_alpha] {
        *v = v.clamp(0.0, 1.0);
    }
    for v in &mut flat[layout.off_alpha..layout.off_dt] {
        *v = v.max(0.0);
    }
    const MAX_DR: f64 = 3.0; // < pi
    for k in 0..layout.n {
        let r = layout.vec3(layout.off_dr, k);
        let dr = read_vec3(flat, r.clone());
        let norm = dr.norm();
        if norm > MAX_DR {
            write_vec3(flat, r, dr * (MAX_DR / norm));
        }
    }
}

/// Fit against a dataset on disk (all records are views of one scene; any
/// latents are ignored). Images are widened from their stored precision.
pub fn fit_scene(
    dataset: &MultiViewDataset,
    anchors: &AnchorSet,
    init: Option<(Vec<Payload>, DeltaSet)>,
    config: &FitConfig,
) -> Result<FitReport, TrainError> {
    dataset.validate()?;
    let mut cameras = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        cameras.push(dataset.camera(i)?);
        targets.push(dataset.load_image(i)?.data);
    }
    fit_scene_views(&cameras, &targets, anchors, init, config)
}
