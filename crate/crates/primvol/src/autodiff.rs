//! Hand-derived reverse-mode gradients of rendered images with respect to
//! payload values (rgb, alpha) and primitive spatial parameters (position,
//! rotation tangent, scale), plus a finite-difference verification harness.
//!
//! The forward pass per ray is a short recurrence: A' = A + F_alpha * dt and
//! C' = C + F_color * dt while unsaturated; the step where A would cross 1
//! instead adds the alpha-weighted mean color scaled by the residual
//! transmittance (1 - A) and clamps A to 1. The backward sweep walks each
//! ray's recorded samples in reverse carrying lambda = dL/dA:
//!
//!   ray end:     lambda = -(g . background)
//!   unsaturated: dL/dF_color = g * dt, dL/dF_alpha = lambda * dt,
//!                lambda unchanged
//!   saturated:   with e = F_color / F_alpha and residual = 1 - A_in:
//!                dL/dF_color = g * residual / F_alpha,
//!                dL/dF_alpha = -(g . e) * residual / F_alpha,
//!                lambda = -(g . e)
//!
//! The saturated alpha-gradient follows the clamp subgradient convention
//! d(min(u,1))/du = 0 at u >= 1: density changes at a saturating sample move
//! only the emitted color quotient, never the coverage.

use crate::geom::{ImageBuffer, Mat3, Vec3};
use crate::render::{render, RenderOptions, RenderTape, SampleRecord};
use crate::scene::{corner_nodes, PrimitiveSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("tape/scene mismatch: {0}")]
    Mismatch(String),
}

/// Gradients for every differentiable scene parameter. Shapes mirror the
/// scene: one rgb/alpha block per primitive plus a 9-dof pose gradient.
/// Rotation gradients live in the right tangent at the current rotation
/// (the axis-angle perturbation R * exp(eps)).
#[derive(Debug, Clone)]
pub struct SceneGrads {
    pub rgb: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub position: Vec<Vec3>,
    pub rotation: Vec<Vec3>,
    pub scale: Vec<Vec3>,
}

impl SceneGrads {
    pub fn zeros(scene: &PrimitiveSet) -> SceneGrads {
        SceneGrads {
            rgb: scene
                .primitives
                .iter()
                .map(|p| vec![0.0; p.payload.node_count() * 3])
                .collect(),
            alpha: scene
                .primitives
                .iter()
                .map(|p| vec![0.0; p.payload.node_count()])
                .collect(),
            position: vec![Vec3::ZERO; scene.len()],
            rotation: vec![Vec3::ZERO; scene.len()],
            scale: vec![Vec3::ZERO; scene.len()],
        }
    }

    /// Elementwise a + b (used by tests and batched losses).
    pub fn add_assign(&mut self, o: &SceneGrads) {
        for (a, b) in self.rgb.iter_mut().zip(&o.rgb) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.alpha.iter_mut().zip(&o.alpha) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.position.iter_mut().zip(&o.position) {
            *a += *b;
        }
        for (a, b) in self.rotation.iter_mut().zip(&o.rotation) {
            *a += *b;
        }
        for (a, b) in self.scale.iter_mut().zip(&o.scale) {
            *a += *b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for block in self.rgb.iter().chain(&self.alpha) {
            for v in block {
                m = m.max(v.abs());
            }
        }
        for v in self.position.iter().chain(&self.rotation).chain(&self.scale) {
            m = m.max(v.abs().max_component());
        }
        m
    }
}

/// Per-sample upstream gradients computed by the reverse ray sweep.
#[derive(Clone, Copy, Default)]
struct Upstream {
    d_color: [f64; 3],
    d_alpha: f64,
}

fn ray_upstream(
    samples: &[SampleRecord],
    g: [f64; 3],
    background: [f64; 3],
    out: &mut [Upstream],
) {
    let mut lambda = -(g[0] * background[0] + g[1] * background[1] + g[2] * background[2]);
    for (i, s) in samples.iter().enumerate().rev() {
        if s.saturated {
            let residual = 1.0 - s.a_in;
            let inv_fa = 1.0 / s.f_alpha;
            let e = [
                s.f_color[0] * inv_fa,
                s.f_color[1] * inv_fa,
                s.f_color[2] * inv_fa,
            ];
            let ge = g[0] * e[0] + g[1] * e[1] + g[2] * e[2];
            out[i] = Upstream {
                d_color: [
                    g[0] * residual * inv_fa,
                    g[1] * residual * inv_fa,
                    g[2] * residual * inv_fa,
                ],
                d_alpha: -ge * residual * inv_fa,
            };
            lambda = -ge;
        } else {
            out[i] = Upstream {
                d_color: [g[0] * s.dt_eff, g[1] * s.dt_eff, g[2] * s.dt_eff],
                d_alpha: lambda * s.dt_eff,
            };
        }
    }
}

/// Reverse-mode gradients of L = sum(dl_dimage .* image) through the recorded
/// forward pass. Deterministic for any thread count: the upstream sweep is
/// per-ray, and each primitive folds its own records in global tape order.
pub fn backward(
    tape: &RenderTape,
    scene: &PrimitiveSet,
    dl_dimage: &ImageBuffer,
) -> Result<SceneGrads, AutodiffError> {
    if dl_dimage.width != tape.width
        || dl_dimage.height != tape.height
        || dl_dimage.channels != 3
    {
        return Err(AutodiffError::Mismatch(format!(
            "gradient image is {}x{}x{}, tape is {}x{}x3",
            dl_dimage.width, dl_dimage.height, dl_dimage.channels, tape.width, tape.height
        )));
    }
    for rec in &tape.prims {
        if rec.prim as usize >= scene.len() {
            return Err(AutodiffError::Mismatch(format!(
                "tape references primitive {} but scene has {}",
                rec.prim,
                scene.len()
            )));
        }
    }

    // pass A: per-ray reverse sweeps (rays are contiguous runs of samples)
    let runs = pixel_runs(&tape.samples);
    let mut upstream = vec![Upstream::default(); tape.samples.len()];
    let chunks: Vec<(usize, Vec<Upstream>)> = runs
        .par_iter()
        .map(|&(start, len)| {
            let pixel = tape.samples[start].pixel;
            let base = pixel as usize * 3;
            let g = [
                dl_dimage.data[base],
                dl_dimage.data[base + 1],
                dl_dimage.data[base + 2],
            ];
            let mut local = vec![Upstream::default(); len];
            ray_upstream(
                &tape.samples[start..start + len],
                g,
                tape.background,
                &mut local,
            );
            (start, local)
        })
        .collect();
    for (start, local) in chunks {
        upstream[start..start + local.len()].copy_from_slice(&local);
    }

    // pass B: group record indices by primitive, preserving global order
    let mut per_prim: Vec<Vec<(u32, u32)>> = vec![Vec::new(); scene.len()];
    for (si, s) in tape.samples.iter().enumerate() {
        for ri in s.prim_start..s.prim_start + s.prim_len {
            per_prim[tape.prims[ri as usize].prim as usize].push((si as u32, ri));
        }
    }

    // pass C: each primitive accumulates its own gradient block sequentially
    let blocks: Vec<PrimGrads> = (0..scene.len())
        .into_par_iter()
        .map(|p| fold_primitive(p, &per_prim[p], tape, scene, &upstream))
        .collect();

    let mut grads = SceneGrads::zeros(scene);
    for (p, block) in blocks.into_iter().enumerate() {
        grads.rgb[p] = block.rgb;
        grads.alpha[p] = block.alpha;
        grads.position[p] = block.position;
        grads.rotation[p] = block.rotation;
        grads.scale[p] = block.scale;
    }
    Ok(grads)
}

/// Contiguous (start, len) runs of equal pixel id in the sample list.
fn pixel_runs(samples: &[SampleRecord]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        let pixel = samples[i].pixel;
        let start = i;
        while i < samples.len() && samples[i].pixel == pixel {
            i += 1;
        }
        runs.push((start, i - start));
    }
    runs
}

struct PrimGrads {
    rgb: Vec<f64>,
    alpha: Vec<f64>,
    position: Vec3,
    rotation: Vec3,
    scale: Vec3,
}

fn fold_primitive(
    p: usize,
    records: &[(u32, u32)],
    tape: &RenderTape,
    scene: &PrimitiveSet,
    upstream: &[Upstream],
) -> PrimGrads {
    let prim = &scene.primitives[p];
    let payload = &prim.payload;
    let m = payload.m();
    let rot: Mat3 = prim.rotation.to_matrix();
    let mut out = PrimGrads {
        rgb: vec![0.0; payload.node_count() * 3],
        alpha: vec![0.0; payload.node_count()],
        position: Vec3::ZERO,
        rotation: Vec3::ZERO,
        scale: Vec3::ZERO,
    };
    for &(si, ri) in records {
        let rec = &tape.prims[ri as usize];
        let up = &upstream[si as usize];
        let a_k = rec.alpha_raw * rec.fade;
        // composed-field chain: F_alpha += a_k, F_color += a_k * c_k
        let d_a_k = up.d_alpha
            + up.d_color[0] * rec.color[0]
            + up.d_color[1] * rec.color[1]
            + up.d_color[2] * rec.color[2];
        let d_c = [
            up.d_color[0] * a_k,
            up.d_color[1] * a_k,
            up.d_color[2] * a_k,
        ];
        let d_alpha_raw = d_a_k * rec.fade;
        let d_fade = d_a_k * rec.alpha_raw;

        // payload node gradients through the stored trilinear weights
        let nodes = corner_nodes(m, rec.i0);
        for (j, &node) in nodes.iter().enumerate() {
            let w = rec.weights[j];
            out.alpha[node] += d_alpha_raw * w;
            let base = node * 3;
            out.rgb[base] += d_c[0] * w;
            out.rgb[base + 1] += d_c[1] * w;
            out.rgb[base + 2] += d_c[2] * w;
        }

        // d local: trilinear value derivatives + fade window derivative
        let fx = [1.0 - rec.frac[0], rec.frac[0]];
        let fy = [1.0 - rec.frac[1], rec.frac[1]];
        let fz = [1.0 - rec.frac[2], rec.frac[2]];
        let mut d_local = [0.0f64; 3];
        for (j, &node) in nodes.iter().enumerate() {
            let (dx, dy, dz) = crate::scene::CORNER_OFFSETS[j];
            let (bx, by, bz) = (dx as usize, dy as usize, dz as usize);
            let sx = if dx == 1 { 1.0 } else { -1.0 };
            let sy = if dy == 1 { 1.0 } else { -1.0 };
            let sz = if dz == 1 { 1.0 } else { -1.0 };
            // d w_j / d frac per axis
            let dw = [
                sx * fy[by] * fz[bz],
                sy * fx[bx] * fz[bz],
                sz * fx[bx] * fy[by],
            ];
            let v_a = payload.alpha[node];
            let base = node * 3;
            // combined payload-value pullback at this corner
            let pullback = d_alpha_raw * v_a
                + d_c[0] * payload.rgb[base]
                + d_c[1] * payload.rgb[base + 1]
                + d_c[2] * payload.rgb[base + 2];
            d_local[0] += dw[0] * pullback;
            d_local[1] += dw[1] * pullback;
            d_local[2] += dw[2] * pullback;
        }
        for axis in 0..3 {
            d_local[axis] *= rec.dfrac[axis];
        }
        let fade_grad = tape.fade.weight_grad(rec.local);
        for axis in 0..3 {
            d_local[axis] += d_fade * fade_grad[axis];
        }

        // spatial chain: local = (R^T (x - t)) / s, so with y = local .* s
        //   dL/dy    = dL/dlocal / s
        //   dL/dt    = -R dL/dy
        //   dL/ds_i  = -dL/dlocal_i * local_i / s_i
        //   dL/deps  = dL/dy x y   (right tangent: R <- R exp(eps))
        let s = prim.scale;
        let local = Vec3::from_array(rec.local);
        let d_local_v = Vec3::from_array(d_local);
        let d_y = d_local_v.div_comp(s);
        let y = local.hadamard(s);
        out.position += -rot.mul_vec(d_y);
        out.rotation += d_y.cross(y);
        out.scale += Vec3::new(
            -d_local_v.x * local.x / s.x,
            -d_local_v.y * local.y / s.y,
            -d_local_v.z * local.z / s.z,
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Finite-difference verification

pub const RGB_TOL: f64 = 1e-5;
pub const ALPHA_TOL: f64 = 1e-5;
pub const SPATIAL_TOL: f64 = 5e-3;
pub const PASS_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub frac_within: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub probes_per_class: usize,
    pub classes: Vec<ClassReport>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

struct ProbeContext<'a> {
    scene: &'a PrimitiveSet,
    camera: &'a crate::geom::Camera,
    opts: RenderOptions,
    weight: ImageBuffer,
    grads: SceneGrads,
    /// true where the ray of pixel [i] has a sample too close to the clamp
    near_clamp: Vec<bool>,
    /// per prim: sample indices that involve it
    prim_samples: Vec<Vec<u32>>,
    tape: RenderTape,
}

impl ProbeContext<'_> {
    fn loss(&self, scene: &PrimitiveSet) -> f64 {
        let bvh = crate::accel::build_bvh(scene);
        let out = render(self.camera, scene, &bvh, &self.opts).expect("probe render");
        out.color
            .data
            .iter()
            .zip(&self.weight.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Does any ray whose samples involve primitive `p` (optionally only
    /// samples touching `node`) sit near the saturation clamp?
    fn ray_near_clamp(&self, p: usize, node: Option<usize>) -> bool {
        let m = self.scene.primitives[p].payload.m();
        for &si in &self.prim_samples[p] {
            let s = &self.tape.samples[si as usize];
            let involved = match node {
                None => true,
                Some(node) => {
                    let mut found = false;
                    for ri in s.prim_start..s.prim_start + s.prim_len {
                        let rec = &self.tape.prims[ri as usize];
                        if rec.prim as usize == p && corner_nodes(m, rec.i0).contains(&node) {
                            found = true;
                            break;
                        }
                    }
                    found
                }
            };
            if involved && self.near_clamp[s.pixel as usize] {
                return true;
            }
        }
        false
    }

    /// Does perturbing primitive `p` between the `plus` and `minus` states
    /// move any recorded sample of `p` across a trilinear cell boundary or
    /// in/out of the clamped outer half-cells? The interpolant is continuous
    /// but its derivative is not, so central differences across such a
    /// crossing are invalid and the probe is skipped.
    fn cell_crossing_event(&self, p: usize, plus: &PrimitiveSet, minus: &PrimitiveSet) -> bool {
        use crate::scene::{local_to_world, trilerp_axis, world_to_local};
        let base = &self.scene.primitives[p];
        let m = base.payload.m();
        for &si in &self.prim_samples[p] {
            let s = &self.tape.samples[si as usize];
            for ri in s.prim_start..s.prim_start + s.prim_len {
                let rec = &self.tape.prims[ri as usize];
                if rec.prim as usize != p {
                    continue;
                }
                let x = local_to_world(base, Vec3::from_array(rec.local));
                for prim in [&plus.primitives[p], &minus.primitives[p]] {
                    let l2 = world_to_local(prim, x);
                    for axis in 0..3 {
                        let (i2, _, d2) = trilerp_axis(m, l2.component(axis));
                        if i2 != rec.i0[axis] || (d2 == 0.0) != (rec.dfrac[axis] == 0.0) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Does perturbing primitive `p` between the `plus` and `minus` states
    /// sweep one of its slab boundaries across a marching-grid midpoint on
    /// any camera ray (or change whether a ray hits at all)? The rendered
    /// loss has a kink at such events, so central differences across them
    /// say nothing about the analytic gradient and the probe is skipped.
    fn boundary_event(&self, p: usize, plus: &PrimitiveSet, minus: &PrimitiveSet) -> bool {
        use crate::accel::intersect_primitive;
        use crate::geom::camera_ray;
        for py in 0..self.camera.height as i64 {
            for px in 0..self.camera.width as i64 {
                let ray = camera_ray(self.camera, (px, py), self.opts.near, self.opts.far)
                    .expect("pixel in bounds");
                let hb = intersect_primitive(&ray, &self.scene.primitives[p]);
                let hp = intersect_primitive(&ray, &plus.primitives[p]);
                let hm = intersect_primitive(&ray, &minus.primitives[p]);
                let (b, u, v) = match (hb, hp, hm) {
                    (Some(b), Some(u), Some(v)) => (b, u, v),
                    (None, None, None) => continue,
                    _ => return true,
                };
                for k in 0..2 {
                    let pick = |t: (f64, f64)| if k == 0 { t.0 } else { t.1 };
                    let lo = pick(b).min(pick(u)).min(pick(v));
                    let hi = pick(b).max(pick(u)).max(pick(v));
                    // pad for curvature of the boundary path between the
                    // sampled perturbation endpoints
                    let pad = 0.5 * (hi - lo) + 1e-9;
                    if midpoint_in_interval(&ray, self.opts.step, lo - pad, hi + pad) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// Does any marching-cell midpoint of `ray` land inside [lo, hi]? Cells
/// follow the renderer's grid: cell i starts at t_min + i * step and the
/// final cell is clipped at t_max.
fn midpoint_in_interval(ray: &crate::geom::Ray, step: f64, lo: f64, hi: f64) -> bool {
    if hi < ray.t_min || lo > ray.t_max {
        return false;
    }
    let mut i = (((lo - ray.t_min) / step).floor() as i64 - 1).max(0);
    loop {
        let start = ray.t_min + i as f64 * step;
        if start >= ray.t_max || start > hi {
            return false;
        }
        let dt_eff = step.min(ray.t_max - start);
        let mid = start + 0.5 * dt_eff;
        if (lo..=hi).contains(&mid) {
            return true;
        }
        i += 1;
    }
}

/// Compare [`backward`] against central finite differences on randomly
/// selected parameters of each class. The loss is a fixed random weighting
/// of the rendered image. Probes whose rays pass within 2h of the saturation
/// clamp, or (for spatial classes) whose samples sit within the boundary
/// guard band, are skipped rather than failed.
pub fn grad_check(
    scene: &PrimitiveSet,
    camera: &crate::geom::Camera,
    opts: &RenderOptions,
    probes_per_class: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, AutodiffError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed ^ 0x6772_6164);

    let mut opts = opts.clone();
    opts.record_tape = true;
    let bvh = crate::accel::build_bvh(scene);
    let out = render(camera, scene, &bvh, &opts).expect("grad_check base render");
    let tape = out.tape.expect("tape requested");

    let n_px = (camera.width * camera.height) as usize;
    let weight_data: Vec<f64> = (0..n_px * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weight =
        ImageBuffer::from_data(camera.width, camera.height, 3, weight_data).expect("weights");

    let grads = backward(&tape, scene, &weight)?;

    // near-clamp rays: any sample with |u - 1| <= 2h
    let mut near_clamp = vec![false; n_px];
    for s in &tape.samples {
        let u = s.a_in + s.f_alpha * s.dt_eff;
        if (u - 1.0).abs() <= 2.0 * h {
            near_clamp[s.pixel as usize] = true;
        }
    }
    let mut prim_samples: Vec<Vec<u32>> = vec![Vec::new(); scene.len()];
    for (si, s) in tape.samples.iter().enumerate() {
        for ri in s.prim_start..s.prim_start + s.prim_len {
            let p = tape.prims[ri as usize].prim as usize;
            if prim_samples[p].last() != Some(&(si as u32)) {
                prim_samples[p].push(si as u32);
            }
        }
    }

    // touched parameter universe, deduplicated deterministically
    let mut touched_nodes: Vec<(u32, u32)> = Vec::new();
    for s in &tape.samples {
        for ri in s.prim_start..s.prim_start + s.prim_len {
            let rec = &tape.prims[ri as usize];
            let m = scene.primitives[rec.prim as usize].payload.m();
            for node in corner_nodes(m, rec.i0) {
                touched_nodes.push((rec.prim, node as u32));
            }
        }
    }
    touched_nodes.sort_unstable();
    touched_nodes.dedup();
    let mut touched_prims: Vec<u32> = tape.prims.iter().map(|r| r.prim).collect();
    touched_prims.sort_unstable();
    touched_prims.dedup();
    if touched_nodes.is_empty() {
        return Err(AutodiffError::Mismatch(
            "no primitive was touched by any ray; grad_check needs coverage".into(),
        ));
    }

    let ctx = ProbeContext {
        scene,
        camera,
        opts: {
            let mut o = opts.clone();
            o.record_tape = false;
            o
        },
        weight,
        grads,
        near_clamp,
        prim_samples,
        tape,
    };

    let mut classes = Vec::new();
    for class in ["rgb", "alpha", "position", "rotation", "scale"] {
        let tol = match class {
            "rgb" => RGB_TOL,
            "alpha" => ALPHA_TOL,
            _ => SPATIAL_TOL,
        };
        let mut checked = 0usize;
        let mut skipped = 0usize;
        let mut max_rel: f64 = 0.0;
        let mut within = 0usize;
        for _ in 0..probes_per_class {
            let probe = match class {
                "rgb" | "alpha" => {
                    let &(p, node) = &touched_nodes[rng.gen_range(0..touched_nodes.len())];
                    let ch = rng.gen_range(0..3u8);
                    Probe::Node { p: p as usize, node: node as usize, ch }
                }
                _ => {
                    let p = touched_prims[rng.gen_range(0..touched_prims.len())] as usize;
                    let axis = rng.gen_range(0..3usize);
                    Probe::Pose { p, axis }
                }
            };
            match run_probe(&ctx, class, probe, h) {
                ProbeOutcome::Skipped => skipped += 1,
                ProbeOutcome::Checked { analytic, fd } => {
                    checked += 1;
                    let e = rel_err(analytic, fd);
                    max_rel = max_rel.max(e);
                    if e < tol {
                        within += 1;
                    }
                }
            }
        }
        let frac_within = if checked == 0 { 0.0 } else { within as f64 / checked as f64 };
        let pass = checked > 0 && frac_within >= PASS_FRACTION;
        classes.push(ClassReport {
            class: class.to_string(),
            tolerance: tol,
            checked,
            skipped,
            max_rel_err: max_rel,
            frac_within,
            pass,
        });
    }
    let pass = classes.iter().all(|c| c.pass);
    Ok(GradCheckReport { h, probes_per_class, classes, pass })
}

enum Probe {
    Node { p: usize, node: usize, ch: u8 },
    Pose { p: usize, axis: usize },
}

enum ProbeOutcome {
    Skipped,
    Checked { analytic: f64, fd: f64 },
}

fn run_probe(ctx: &ProbeContext, class: &str, probe: Probe, h: f64) -> ProbeOutcome {
    match (class, probe) {
        ("rgb", Probe::Node { p, node, ch }) => {
            if ctx.ray_near_clamp(p, Some(node)) {
                return ProbeOutcome::Skipped;
            }
            let analytic = ctx.grads.rgb[p][node * 3 + ch as usize];
            let fd = central_diff(ctx, h, |scene, d| {
                scene.primitives[p].payload.rgb[node * 3 + ch as usize] += d;
            });
            ProbeOutcome::Checked { analytic, fd }
        }
        ("alpha", Probe::Node { p, node, .. }) => {
            if ctx.ray_near_clamp(p, Some(node)) {
                return ProbeOutcome::Skipped;
            }
            let analytic = ctx.grads.alpha[p][node];
            let fd = central_diff(ctx, h, |scene, d| {
                scene.primitives[p].payload.alpha[node] += d;
            });
            ProbeOutcome::Checked { analytic, fd }
        }
        (_, Probe::Pose { p, axis }) => {
            if ctx.ray_near_clamp(p, None) {
                return ProbeOutcome::Skipped;
            }
            let perturb: Box<dyn Fn(&mut PrimitiveSet, f64)> = match class {
                "position" => Box::new(move |scene: &mut PrimitiveSet, d: f64| {
                    let mut t = scene.primitives[p].position;
                    t.set_component(axis, t.component(axis) + d);
                    scene.primitives[p].position = t;
                }),
                "rotation" => Box::new(move |scene: &mut PrimitiveSet, d: f64| {
                    let mut eps = Vec3::ZERO;
                    eps.set_component(axis, d);
                    let r = scene.primitives[p].rotation;
                    scene.primitives[p].rotation =
                        r.compose(&crate::geom::Rotation::from_axis_angle(eps));
                }),
                _ => Box::new(move |scene: &mut PrimitiveSet, d: f64| {
                    let mut s = scene.primitives[p].scale;
                    s.set_component(axis, s.component(axis) + d);
                    scene.primitives[p].scale = s;
                }),
            };
            let mut plus = ctx.scene.clone();
            perturb(&mut plus, h);
            let mut minus = ctx.scene.clone();
            perturb(&mut minus, -h);
            if ctx.boundary_event(p, &plus, &minus) || ctx.cell_crossing_event(p, &plus, &minus) {
                return ProbeOutcome::Skipped;
            }
            let analytic = match class {
                "position" => ctx.grads.position[p].component(axis),
                "rotation" => ctx.grads.rotation[p].component(axis),
                _ => ctx.grads.scale[p].component(axis),
            };
            let fd = (ctx.loss(&plus) - ctx.loss(&minus)) / (2.0 * h);
            ProbeOutcome::Checked { analytic, fd }
        }
        _ => unreachable!("probe/class pairing"),
    }
}

fn central_diff(
    ctx: &ProbeContext,
    h: f64,
    perturb: impl Fn(&mut PrimitiveSet, f64),
) -> f64 {
    let mut plus = ctx.scene.clone();
    perturb(&mut plus, h);
    let mut minus = ctx.scene.clone();
    perturb(&mut minus, -h);
    (ctx.loss(&plus) - ctx.loss(&minus)) / (2.0 * h)
}
