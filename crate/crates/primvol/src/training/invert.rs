//! Image inversion: recover the latent code (and optionally refine the
//! generator parameters) that reproduce a single target view.
//!
//! Phase 1 optimizes the latent code alone with the generator frozen; phase 2
//! continues jointly over the latent and all generator parameters. The
//! returned result is the best iterate by loss seen anywhere in either phase,
//! which makes inversion a fixed point: starting at a latent that already
//! reproduces the target returns that latent unchanged with zero loss.

use std::time::Instant;

use crate::accel::build_bvh;
use crate::autodiff::backward;
use crate::geom::{Camera, ImageBuffer, Vec3};
use crate::generator::{
    generate_scene_traced, generator_backward, GeneratorParams, LatentCode,
};
use crate::mesh::AnchorSet;
use crate::render::{render, RenderOptions};

use super::losses::total_loss;
use super::optim::{Adam, AdamConfig};
use super::{LossWeights, TrainError};

/// Knobs of an inversion run.
#[derive(Debug, Clone)]
pub struct InvertConfig {
    /// Latent-only iterations (generator frozen).
    pub phase1_iters: usize,
    /// Joint latent + generator iterations, run after phase 1.
    pub phase2_iters: usize,
    /// Optimizer for both phases; the default learning rate is 0.001.
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub render: RenderOptions,
    /// Background behind the generated scene.
    pub background: [f64; 3],
    /// Starting latent (zeros when absent).
    pub init_w: Option<Vec<f64>>,
    pub log_every: usize,
    pub print_progress: bool,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            phase1_iters: 1200,
            phase2_iters: 800,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            render: RenderOptions::default(),
            background: [0.0, 0.0, 0.0],
            init_w: None,
            log_every: 1,
            print_progress: false,
        }
    }
}

/// One logged inversion step.
#[derive(Debug, Clone, Copy)]
pub struct InvertLogEntry {
    /// Global step index across both phases.
    pub step: usize,
    /// 1 = latent-only, 2 = joint.
    pub phase: u8,
    pub total: f64,
    pub rec: f64,
    pub wall_ms: f64,
}

/// Result of an inversion run: the best iterate by loss.
#[derive(Debug)]
pub struct InvertReport {
    pub w: Vec<f64>,
    /// Generator parameters of the best iterate (refined only in phase 2).
    pub params: GeneratorParams,
    pub best_loss: f64,
    /// Global step at which the best iterate was observed.
    pub best_step: usize,
    pub log: Vec<InvertLogEntry>,
    pub diverged_at: Option<usize>,
}

/// The camera's forward axis in world space.
fn camera_forward(camera: &Camera) -> Vec3 {
    camera.rotation.to_matrix().mul_vec(Vec3::new(0.0, 0.0, 1.0))
}

/// Recover the latent (phase 1) and refined generator (phase 2) that best
/// reproduce `target` from `camera`.
pub fn invert(
    target: &ImageBuffer,
    camera: &Camera,
    generator: &GeneratorParams,
    anchors: &AnchorSet,
    config: &InvertConfig,
) -> Result<InvertReport, TrainError> {
    if target.channels != 3 {
        return Err(TrainError::Invalid(format!(
            "target must be a 3-channel image, got {} channels",
            target.channels
        )));
    }
    if config.weights.adversarial_enabled {
        return Err(TrainError::Invalid(
            "inversion has no critic; disable the adversarial term".into(),
        ));
    }
    if config.phase1_iters + config.phase2_iters == 0 {
        return Err(TrainError::Invalid("at least one iteration is required".into()));
    }
    if config.log_every == 0 {
        return Err(TrainError::Invalid("log_every must be >= 1".into()));
    }
    if anchors.len() != generator.n_prim {
        return Err(TrainError::Invalid(format!(
            "generator drives {} primitives, anchors hold {}",
            generator.n_prim,
            anchors.len()
        )));
    }
    let d_w = generator.d_w;
    let mut w = match &config.init_w {
        Some(v) => {
            if v.len() != d_w {
                return Err(TrainError::Invalid(format!(
                    "init_w has {} dims, generator expects {d_w}",
                    v.len()
                )));
            }
            v.clone()
        }
        None => vec![0.0; d_w],
    };

    let mut params = generator.clone();
    let mut flat = Vec::with_capacity(params.param_count());
    params.copy_params_to(&mut flat);

    let mut opts = config.render.clone();
    opts.record_tape = true;
    opts.background = Some(config.background);
    let view_dir = camera_forward(camera);
    let (w_px, h_px) = (target.width as usize, target.height as usize);

    // One forward/backward evaluation at the current iterate.
    let evaluate = |w: &[f64],
                        params: &GeneratorParams|
     -> Result<(f64, f64, Vec<f64>, Vec<f64>), TrainError> {
        let latent = LatentCode::new(w.to_vec())?;
        let (scene, _, trace) =
            generate_scene_traced(params, anchors, &latent, view_dir, config.background)?;
        let bvh = build_bvh(&scene);
        let out = render(camera, &scene, &bvh, &opts)?;
        if out.color.width != target.width || out.color.height != target.height {
            return Err(TrainError::Shape(format!(
                "target is {}x{}, camera renders {}x{}",
                target.width, target.height, out.color.width, out.color.height
            )));
        }
        let (breakdown, d_img, d_scale) = total_loss(
            &out.color.data,
            &target.data,
            w_px,
            h_px,
            &scene,
            &config.weights,
            None,
        )?;
        let tape = out.tape.as_ref().expect("tape recording was enabled");
        let d_img = ImageBuffer::from_data(out.color.width, out.color.height, 3, d_img)?;
        let mut grads = backward(tape, &scene, &d_img)?;
        for (g, extra) in grads.scale.iter_mut().zip(&d_scale) {
            *g += *extra;
        }
        let gen_grads = generator_backward(params, anchors, &trace, &grads)?;
        let d_flat = gen_grads.flat();
        Ok((breakdown.total, breakdown.rec, gen_grads.d_w, d_flat))
    };

    let mut best_loss = f64::INFINITY;
    let mut best_w = w.clone();
    let mut best_flat = flat.clone();
    let mut best_step = 0usize;
    let mut log = Vec::new();
    let mut diverged_at = None;
    let started = Instant::now();

    let consider =
        |loss: f64, step: usize, w: &[f64], flat: &[f64], best: &mut (f64, Vec<f64>, Vec<f64>, usize)| {
            if loss < best.0 {
                best.0 = loss;
                best.1 = w.to_vec();
                best.2 = flat.to_vec();
                best.3 = step;
            }
        };
    let mut best = (best_loss, best_w, best_flat, best_step);

    // Phase 1: latent only.
    let mut adam1 = Adam::new(d_w, config.adam);
    let mut step = 0usize;
    let mut halted = false;
    for _ in 0..config.phase1_iters {
        let (total, rec, d_w_grad, _) = evaluate(&w, &params)?;
        if !total.is_finite() {
            diverged_at = Some(step);
            halted = true;
            break;
        }
        consider(total, step, &w, &flat, &mut best);
        if step % config.log_every == 0 {
            let entry = InvertLogEntry {
                step,
                phase: 1,
                total,
                rec,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            if config.print_progress {
                eprintln!("invert p1 step {:>6} total {:.6} rec {:.6}", step, total, rec);
            }
            log.push(entry);
        }
        adam1.step(&mut w, &d_w_grad)?;
        step += 1;
    }

    // Phase 2: joint latent + generator parameters.
    if !halted && config.phase2_iters > 0 {
        let mut joint = Vec::with_capacity(d_w + flat.len());
        joint.extend_from_slice(&w);
        joint.extend_from_slice(&flat);
        let mut adam2 = Adam::new(joint.len(), config.adam);
        for _ in 0..config.phase2_iters {
            w.copy_from_slice(&joint[..d_w]);
            flat.copy_from_slice(&joint[d_w..]);
            params.set_params_from(&flat);
            let (total, rec, d_w_grad, d_flat) = evaluate(&w, &params)?;
            if !total.is_finite() {
                diverged_at = Some(step);
                break;
            }
            consider(total, step, &w, &flat, &mut best);
            if step % config.log_every == 0 {
                let entry = InvertLogEntry {
                    step,
                    phase: 2,
                    total,
                    rec,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                };
                if config.print_progress {
                    eprintln!("invert p2 step {:>6} total {:.6} rec {:.6}", step, total, rec);
                }
                log.push(entry);
            }
            let mut g = Vec::with_capacity(joint.len());
            g.extend_from_slice(&d_w_grad);
            g.extend_from_slice(&d_flat);
            adam2.step(&mut joint, &g)?;
            step += 1;
        }
    }

    (best_loss, best_w, best_flat, best_step) = best;
    if !best_loss.is_finite() {
        return Err(TrainError::NonFinite(
            "inversion diverged before completing a single evaluation".into(),
        ));
    }
    params.set_params_from(&best_flat);
    Ok(InvertReport {
        w: best_w,
        params,
        best_loss,
        best_step,
        log,
        diverged_at,
    })
}
