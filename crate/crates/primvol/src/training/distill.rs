//! Knowledge distillation: train the latent-conditioned generator to
//! reproduce a multi-view teacher dataset.
//!
//! Each step samples a minibatch of (latent, camera, image) records, renders
//! the generated scene per item, and pushes the composite loss through the
//! renderer and generator backward passes. Batch items are rendered in
//! parallel but folded in index order, and the sampler is a counted ChaCha
//! stream, so a run is bitwise reproducible for any thread count and can
//! resume exactly from a checkpoint.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::accel::build_bvh;
use crate::autodiff::backward;
use crate::geom::{psnr, Camera, ImageBuffer, Vec3};
use crate::generator::{
    generate_scene, generate_scene_traced, generator_backward, GeneratorParams, LatentCode,
};
use crate::mesh::AnchorSet;
use crate::render::{render, RenderOptions};

use super::critic::{loss_disc_with_param_grad, ConvCritic, CriticModel};
use super::losses::total_loss;
use super::optim::{Adam, AdamConfig};
use super::teacher::MultiViewDataset;
use super::{LossWeights, TrainError};

/// Knobs of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillConfig {
    /// Total optimization steps (a resumed run continues toward this count).
    pub steps: usize,
    /// Minibatch size.
    pub batch: usize,
    /// Generator optimizer; the default learning rate is 0.001.
    pub adam: AdamConfig,
    /// Critic optimizer, used only when the adversarial term is enabled; the
    /// default learning rate is 1e-5.
    pub critic_adam: AdamConfig,
    pub weights: LossWeights,
    pub render: RenderOptions,
    /// Background behind generated scenes (match the teacher's).
    pub background: [f64; 3],
    /// Seed of the minibatch sampler.
    pub seed: u64,
    /// Write a checkpoint every n steps (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Resume from a checkpoint written by an identical configuration.
    pub resume_from: Option<PathBuf>,
    pub log_every: usize,
    pub print_progress: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 1000,
            batch: 8,
            adam: AdamConfig::default(),
            critic_adam: AdamConfig { lr: 1e-5, ..AdamConfig::default() },
            weights: LossWeights::default(),
            render: RenderOptions::default(),
            background: [0.0, 0.0, 0.0],
            seed: 42,
            checkpoint_every: 0,
            checkpoint_path: None,
            resume_from: None,
            log_every: 1,
            print_progress: false,
        }
    }
}

/// One logged step (batch means).
#[derive(Debug, Clone, Copy)]
pub struct DistillLogEntry {
    pub step: usize,
    pub total: f64,
    pub rec: f64,
    pub perc: f64,
    pub vol: f64,
    pub adv: f64,
    pub wall_ms: f64,
}

/// Result of a distillation run.
#[derive(Debug)]
pub struct DistillReport {
    pub params: GeneratorParams,
    pub log: Vec<DistillLogEntry>,
    pub diverged_at: Option<usize>,
    /// The trained critic when adversarial training was enabled.
    pub critic: Option<ConvCritic>,
}

/// The forward axis of a camera in world space (unit).
pub fn camera_forward(camera: &Camera) -> Vec3 {
    camera.rotation.to_matrix().mul_vec(Vec3::new(0.0, 0.0, 1.0))
}

/// In-memory view of one dataset record.
struct Item {
    latent: LatentCode,
    camera: Camera,
    view_dir: Vec3,
    target: Vec<f64>,
}

fn load_items(dataset: &MultiViewDataset) -> Result<Vec<Item>, TrainError> {
    let mut items = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let rec = &dataset.records[i];
        let w = rec
            .w
            .clone()
            .ok_or_else(|| TrainError::Invalid("distill needs latent codes".into()))?;
        let camera = dataset.camera(i)?;
        let view_dir = camera_forward(&camera);
        let target = dataset.load_image(i)?.data;
        items.push(Item { latent: LatentCode::new(w)?, camera, view_dir, target });
    }
    Ok(items)
}

const CKPT_MAGIC: &[u8] = b"PRIMVOL-DISTILL 1\n";

fn write_checkpoint(
    path: &Path,
    step: u64,
    rng: &ChaCha20Rng,
    adam: &Adam,
    flat: &[f64],
) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&rng.get_seed());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    adam.write_to(&mut buf)?;
    buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(u64, ChaCha20Rng, Adam, Vec<f64>), TrainError> {
    let blob = fs::read(path)?;
    let mut r = blob.as_slice();
    let mut magic = vec![0u8; CKPT_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(TrainError::BadData(format!("{path:?} is not a distill checkpoint")));
    }
    let mut u8x8 = [0u8; 8];
    r.read_exact(&mut u8x8)?;
    let step = u64::from_le_bytes(u8x8);
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let mut posb = [0u8; 16];
    r.read_exact(&mut posb)?;
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_word_pos(u128::from_le_bytes(posb));
    let adam = Adam::read_from(&mut r)?;
    r.read_exact(&mut u8x8)?;
    let n = u64::from_le_bytes(u8x8) as usize;
    let mut flat = Vec::with_capacity(n);
    let mut f = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut f)?;
        flat.push(f64::from_le_bytes(f));
    }
    if !r.is_empty() {
        return Err(TrainError::BadData("trailing bytes in checkpoint".into()));
    }
    Ok((step, rng, adam, flat))
}

/// Train `init` against the dataset. Returns the trained parameters, the
/// loss trace, and (when adversarial training is on) the critic.
pub fn distill(
    dataset: &MultiViewDataset,
    anchors: &AnchorSet,
    init: GeneratorParams,
    config: &DistillConfig,
) -> Result<DistillReport, TrainError> {
    dataset.validate()?;
    if !dataset.has_latents() {
        return Err(TrainError::Invalid("distill dataset must carry latent codes".into()));
    }
    if config.batch == 0 || config.steps == 0 || config.log_every == 0 {
        return Err(TrainError::Invalid("batch, steps and log_every must be >= 1".into()));
    }
    if anchors.len() != init.n_prim {
        return Err(TrainError::Invalid(format!(
            "generator drives {} primitives, anchors hold {}",
            init.n_prim,
            anchors.len()
        )));
    }
    let items = load_items(dataset)?;
    if items[0].latent.dim() != init.d_w {
        return Err(TrainError::Invalid(format!(
            "dataset latents have {} dims, generator expects {}",
            items[0].latent.dim(),
            init.d_w
        )));
    }
    let (w_px, h_px) = (dataset.width() as usize, dataset.height() as usize);

    let mut params = init;
    let mut flat = Vec::with_capacity(params.param_count());
    params.copy_params_to(&mut flat);

    let mut opts = config.render.clone();
    opts.record_tape = true;
    opts.background = Some(config.background);

    let mut critic = if config.weights.adversarial_enabled {
        Some(ConvCritic::random(w_px, h_px, config.seed ^ 0x44))
    } else {
        None
    };
    let mut critic_adam = critic
        .as_ref()
        .map(|c| Adam::new(c.param_count(), config.critic_adam));

    // Optimizer and sampler, possibly restored from a checkpoint.
    let mut adam = Adam::new(flat.len(), config.adam);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x6469_7374_696c_6c21);
    let mut start_step = 0usize;
    if let Some(ck) = &config.resume_from {
        if critic.is_some() {
            return Err(TrainError::Invalid(
                "checkpoint resume is not supported with the adversarial term enabled".into(),
            ));
        }
        let (step, r, a, f) = read_checkpoint(ck)?;
        if f.len() != flat.len() {
            return Err(TrainError::BadData(format!(
                "checkpoint holds {} parameters, generator has {}",
                f.len(),
                flat.len()
            )));
        }
        start_step = step as usize;
        rng = r;
        adam = a;
        flat = f;
        params.set_params_from(&flat);
    }
    if config.checkpoint_every > 0 && config.checkpoint_path.is_none() {
        return Err(TrainError::Invalid("checkpoint_every set without checkpoint_path".into()));
    }
    if config.checkpoint_every > 0 && critic.is_some() {
        return Err(TrainError::Invalid(
            "checkpointing is not supported with the adversarial term enabled".into(),
        ));
    }

    let mut log = Vec::new();
    let mut diverged_at = None;
    let started = Instant::now();

    for step in start_step..config.steps {
        let batch: Vec<usize> =
            (0..config.batch).map(|_| rng.gen_range(0..items.len())).collect();

        // Per-item forward/backward, parallel, folded in index order below.
        let results: Result<Vec<_>, TrainError> = batch
            .par_iter()
            .map(|&idx| {
                let item = &items[idx];
                let (scene, _, trace) = generate_scene_traced(
                    &params,
                    anchors,
                    &item.latent,
                    item.view_dir,
                    config.background,
                )?;
                let bvh = build_bvh(&scene);
                let out = render(&item.camera, &scene, &bvh, &opts)?;
                let (breakdown, d_img, d_scale) = total_loss(
                    &out.color.data,
                    &item.target,
                    w_px,
                    h_px,
                    &scene,
                    &config.weights,
                    critic.as_ref().map(|c| c as &dyn CriticModel),
                )?;
                let tape = out.tape.as_ref().expect("tape recording was enabled");
                let d_img =
                    ImageBuffer::from_data(out.color.width, out.color.height, 3, d_img)?;
                let mut grads = backward(tape, &scene, &d_img)?;
                for (g, extra) in grads.scale.iter_mut().zip(&d_scale) {
                    *g += *extra;
                }
                let gen_grads = generator_backward(&params, anchors, &trace, &grads)?;
                Ok((gen_grads.flat(), breakdown, out.color.data))
            })
            .collect();
        let results = results?;

        // Fixed-order reduction.
        let mut g_total = vec![0.0; flat.len()];
        let mut mean = DistillLogEntry {
            step,
            total: 0.0,
            rec: 0.0,
            perc: 0.0,
            vol: 0.0,
            adv: 0.0,
            wall_ms: 0.0,
        };
        let inv_b = 1.0 / config.batch as f64;
        for (g, breakdown, _) in &results {
            for (acc, v) in g_total.iter_mut().zip(g) {
                *acc += inv_b * v;
            }
            mean.total += inv_b * breakdown.total;
            mean.rec += inv_b * breakdown.rec;
            mean.perc += inv_b * breakdown.perc;
            mean.vol += inv_b * breakdown.vol;
            mean.adv += inv_b * breakdown.adv;
        }
        if !mean.total.is_finite() {
            diverged_at = Some(step);
            break;
        }

        adam.step(&mut flat, &g_total)?;
        params.set_params_from(&flat);

        // Critic update on this batch's rendered (fake) and target (real)
        // images.
        if let (Some(c), Some(ca)) = (critic.as_mut(), critic_adam.as_mut()) {
            let fake: Vec<Vec<f64>> = results.iter().map(|(_, _, img)| img.clone()).collect();
            let real: Vec<Vec<f64>> =
                batch.iter().map(|&idx| items[idx].target.clone()).collect();
            let (_, d_theta) =
                loss_disc_with_param_grad(c, &fake, &real, config.weights.lambda_reg)?;
            let mut theta = c.params();
            ca.step(&mut theta, &d_theta)?;
            c.set_params(&theta)?;
        }

        if step % config.log_every == 0 || step + 1 == config.steps {
            mean.wall_ms = started.elapsed().as_secs_f64() * 1e3;
            if config.print_progress {
                eprintln!(
                    "distill step {:>6} total {:.6} rec {:.6} perc {:.6} vol {:.6} adv {:.6}",
                    mean.step, mean.total, mean.rec, mean.perc, mean.vol, mean.adv
                );
            }
            log.push(mean);
        }

        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            let path = config.checkpoint_path.as_ref().expect("validated above");
            write_checkpoint(path, (step + 1) as u64, &rng, &adam, &flat)?;
        }
    }

    Ok(DistillReport { params, log, diverged_at, critic })
}

/// Mean PSNR of the generator against every record of a dataset (renders the
/// generated scene from each record's latent and camera).
pub fn eval_dataset_psnr(
    params: &GeneratorParams,
    anchors: &AnchorSet,
    dataset: &MultiViewDataset,
    render_opts: &RenderOptions,
    background: [f64; 3],
) -> Result<f64, TrainError> {
    dataset.validate()?;
    if !dataset.has_latents() {
        return Err(TrainError::Invalid("evaluation dataset must carry latent codes".into()));
    }
    let mut opts = render_opts.clone();
    opts.record_tape = false;
    opts.background = Some(background);
    let mut sum = 0.0;
    for i in 0..dataset.len() {
        let rec = &dataset.records[i];
        let latent = LatentCode::new(rec.w.clone().expect("validated"))?;
        let camera = dataset.camera(i)?;
        let (scene, _) =
            generate_scene(params, anchors, &latent, camera_forward(&camera), background)?;
        let bvh = build_bvh(&scene);
        let out = render(&camera, &scene, &bvh, &opts)?;
        let target = dataset.load_image(i)?;
        sum += psnr(&out.color, &target)?;
    }
    Ok(sum / dataset.len() as f64)
}

/// Render the generated scene for one latent/camera pair (shared by the CLI
/// and evaluation code).
pub fn render_latent(
    params: &GeneratorParams,
    anchors: &AnchorSet,
    w: &[f64],
    camera: &Camera,
    render_opts: &RenderOptions,
    background: [f64; 3],
) -> Result<ImageBuffer, TrainError> {
    let latent = LatentCode::new(w.to_vec())?;
    let (scene, _) =
        generate_scene(params, anchors, &latent, camera_forward(camera), background)?;
    let bvh = build_bvh(&scene);
    let mut opts = render_opts.clone();
    opts.record_tape = false;
    opts.background = Some(background);
    Ok(render(camera, &scene, &bvh, &opts)?.color)
}
