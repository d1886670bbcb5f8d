//! Volume rendering: opacity fade, ray integration with clamped linear
//! transmittance, the dense stepping oracle, overlay visualization, and the
//! replayable render tape the backward pass consumes.
//!
//! Transmittance model: along a ray the accumulated opacity A is the clamped
//! integral min(∫ alpha dt, 1). Discretized with a fixed world-space step and
//! midpoint sampling, each sample adds a = alpha * dt_eff; once A reaches 1
//! the ray is saturated and marching stops. Crucially the primitive-accelerated
//! renderer and the dense oracle share the same step grid (anchored at
//! ray.t_min), the same field evaluation, and the same compositing update, so
//! they agree bit for bit: the only cells the fast path skips are cells whose
//! midpoint lies outside every primitive, which contribute exactly zero.

use crate::accel::{intersect, Bvh, RayHitList};
use crate::geom::{camera_ray, Camera, GeomError, ImageBuffer, Ray, Vec3};
use crate::scene::{FieldEval, PrimSampleRecord, PrimitiveSet};
use rayon::prelude::*;
use thiserror::Error;

/// Slack added to hit intervals when deciding which primitives are candidates
/// for a sample; covers rounding between the slab test and the containment
/// test. Candidates that don't actually contain the point contribute exact
/// zeros, so generosity here cannot change results.
const INTERVAL_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid render options: {0}")]
    BadOptions(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Opacity fade window. Inside a primitive the sampled density is scaled by
/// `prod_axis(1 - |l_a|^rho)` so contributions roll off smoothly toward the
/// box faces and spatial gradients stay continuous.
#[derive(Debug, Clone, Copy)]
pub struct FadeParams {
    pub enabled: bool,
    /// Window sharpness; >= 1 so the weight is differentiable at l = 0.
    pub rho: f64,
}

impl Default for FadeParams {
    fn default() -> Self {
        FadeParams { enabled: true, rho: 8.0 }
    }
}

impl FadeParams {
    pub const OFF: FadeParams = FadeParams { enabled: false, rho: 8.0 };

    /// Fade weight at local coordinates, clamped to [0, 1].
    pub fn weight(&self, local: [f64; 3]) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        let mut w = 1.0;
        for l in local {
            w *= 1.0 - l.abs().powf(self.rho);
        }
        w.clamp(0.0, 1.0)
    }

    /// d weight / d local. Zero when disabled or when the product clamps.
    pub fn weight_grad(&self, local: [f64; 3]) -> [f64; 3] {
        if !self.enabled {
            return [0.0; 3];
        }
        let factors = local.map(|l| 1.0 - l.abs().powf(self.rho));
        let w: f64 = factors.iter().product();
        if !(0.0..=1.0).contains(&w) {
            return [0.0; 3];
        }
        let mut g = [0.0; 3];
        for i in 0..3 {
            let others: f64 = (0..3).filter(|&j| j != i).map(|j| factors[j]).product();
            let l = local[i];
            g[i] = -self.rho * l.abs().powf(self.rho - 1.0) * l.signum() * others;
            if l == 0.0 {
                g[i] = 0.0;
            }
        }
        g
    }
}

/// Discretization and compositing controls shared by every render path.
#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// World-space step between sample cells.
    pub step: f64,
    /// Ray bounds.
    pub near: f64,
    pub far: f64,
    /// Hard cap on cells per ray.
    pub max_samples: usize,
    /// Overrides the scene background when set.
    pub background: Option<[f64; 3]>,
    pub fade: FadeParams,
    pub record_tape: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            step: 0.02,
            near: 0.05,
            far: 20.0,
            max_samples: 1_000_000,
            background: None,
            fade: FadeParams::default(),
            record_tape: false,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(RenderError::BadOptions(format!("step = {}", self.step)));
        }
        if !(self.near >= 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(RenderError::BadOptions(format!(
                "near/far = {}/{}",
                self.near, self.far
            )));
        }
        if self.max_samples == 0 {
            return Err(RenderError::BadOptions("max_samples = 0".into()));
        }
        if !self.fade.rho.is_finite() || self.fade.rho < 1.0 {
            return Err(RenderError::BadOptions(format!("fade rho = {}", self.fade.rho)));
        }
        Ok(())
    }

    pub fn effective_background(&self, scene: &PrimitiveSet) -> [f64; 3] {
        self.background.unwrap_or(scene.background)
    }
}

// ---------------------------------------------------------------------------
// Tape

/// One integration sample: compositing state plus the range of per-primitive
/// records backing it.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub pixel: u32,
    pub dt_eff: f64,
    /// Accumulated coverage before this sample.
    pub a_in: f64,
    /// Composed field alpha at the sample point.
    pub f_alpha: f64,
    /// Composed premultiplied color at the sample point.
    pub f_color: [f64; 3],
    pub saturated: bool,
    pub prim_start: u32,
    pub prim_len: u32,
}

/// Everything needed to rebuild the forward pass exactly: per-sample
/// compositing records plus per-primitive trilinear details. Samples are
/// stored pixel-major (row-major pixels, ascending t within a pixel).
#[derive(Debug, Clone)]
pub struct RenderTape {
    pub width: u32,
    pub height: u32,
    pub background: [f64; 3],
    pub fade: FadeParams,
    pub samples: Vec<SampleRecord>,
    pub prims: Vec<PrimSampleRecord>,
}

/// A render result: linear color, coverage, and (optionally) the tape.
#[derive(Debug)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    pub coverage: ImageBuffer,
    pub tape: Option<RenderTape>,
}

// ---------------------------------------------------------------------------
// Shared integration pieces

/// Geometry of step cell `i` on the global grid anchored at t_min: midpoint
/// and effective length (the last cell is clipped by t_max). None once the
/// cell would start at or beyond t_max.
#[inline]
fn cell_geometry(t_min: f64, t_max: f64, step: f64, i: usize) -> Option<(f64, f64)> {
    let start = t_min + i as f64 * step;
    if start >= t_max {
        return None;
    }
    let dt_eff = step.min(t_max - start);
    Some((start + 0.5 * dt_eff, dt_eff))
}

#[derive(Debug, Clone, Copy)]
struct RayState {
    a: f64,
    c: [f64; 3],
}

impl RayState {
    const START: RayState = RayState { a: 0.0, c: [0.0; 3] };

    /// Apply one sample. Returns true when the ray saturates.
    /// Both render paths and the tape replay go through this single update.
    #[inline]
    fn composite(&mut self, f_color: [f64; 3], f_alpha: f64, dt_eff: f64) -> bool {
        if f_alpha == 0.0 {
            return false;
        }
        let a = f_alpha * dt_eff;
        let u = self.a + a;
        if u < 1.0 {
            self.c[0] += f_color[0] * dt_eff;
            self.c[1] += f_color[1] * dt_eff;
            self.c[2] += f_color[2] * dt_eff;
            self.a = u;
            debug_assert!(self.a < 1.0 && self.a >= 0.0);
            false
        } else {
            // emitted color is the alpha-weighted mean; scale by residual
            // transmittance and clamp coverage
            let residual = 1.0 - self.a;
            self.c[0] += f_color[0] / f_alpha * residual;
            self.c[1] += f_color[1] / f_alpha * residual;
            self.c[2] += f_color[2] / f_alpha * residual;
            self.a = 1.0;
            true
        }
    }

    fn finish(&self, background: [f64; 3]) -> [f64; 3] {
        let residual = 1.0 - self.a;
        [
            self.c[0] + residual * background[0],
            self.c[1] + residual * background[1],
            self.c[2] + residual * background[2],
        ]
    }
}

struct TapeChunk {
    samples: Vec<SampleRecord>,
    prims: Vec<PrimSampleRecord>,
}

/// Integrate one ray through its hit intervals on the shared step grid.
/// Candidate primitives per cell come from a sweep over the sorted hit list;
/// cells with no candidates are skipped (they contribute exactly zero).
#[allow(clippy::too_many_arguments)]
fn integrate_ray_hits(
    ray: &Ray,
    hits: &RayHitList,
    scene: &PrimitiveSet,
    fe: &FieldEval,
    opts: &RenderOptions,
    pixel: u32,
    mut tape: Option<&mut TapeChunk>,
) -> ([f64; 3], f64) {
    let background = opts.effective_background(scene);
    let mut state = RayState::START;
    if hits.is_empty() {
        return (state.finish(background), 0.0);
    }
    let step = opts.step;
    let mut active: Vec<(u32, f64)> = Vec::new(); // (prim, t_exit), sorted by prim
    let mut candidates: Vec<u32> = Vec::new();
    let mut pending = 0usize;
    let mut i = 0usize;
    while i < opts.max_samples {
        if active.is_empty() {
            if pending >= hits.len() {
                break;
            }
            // conservative jump to just before the next interval's first cell
            let te = hits[pending].t_enter - INTERVAL_EPS;
            let target = ((te - ray.t_min) / step).floor() as i64 - 1;
            if target > i as i64 {
                i = target as usize;
                continue;
            }
        }
        let Some((t_mid, dt_eff)) = cell_geometry(ray.t_min, ray.t_max, step, i) else {
            break;
        };
        while pending < hits.len() && hits[pending].t_enter - INTERVAL_EPS <= t_mid {
            let h = hits[pending];
            pending += 1;
            if h.t_exit + INTERVAL_EPS >= t_mid {
                let at = active.partition_point(|&(p, _)| p < h.prim);
                active.insert(at, (h.prim, h.t_exit));
            }
        }
        active.retain(|&(_, t_exit)| t_exit + INTERVAL_EPS >= t_mid);
        if !active.is_empty() {
            candidates.clear();
            candidates.extend(active.iter().map(|&(p, _)| p));
            let x = ray.point_at(t_mid);
            let prim_start = tape.as_ref().map_or(0, |t| t.prims.len() as u32);
            let records = tape.as_deref_mut().map(|t| &mut t.prims);
            let (f_color, f_alpha) =
                fe.eval_subset(scene, x, &opts.fade, &candidates, records);
            let f_color = f_color.to_array();
            let prim_len = tape
                .as_ref()
                .map_or(0, |t| t.prims.len() as u32 - prim_start);
            if prim_len == 0 && tape.is_some() {
                // no primitive actually contained the midpoint: nothing to
                // differentiate, and the state does not change
                debug_assert_eq!(f_alpha, 0.0);
            }
            let a_in = state.a;
            let saturated = state.composite(f_color, f_alpha, dt_eff);
            if let Some(t) = tape.as_deref_mut() {
                if prim_len > 0 {
                    t.samples.push(SampleRecord {
                        pixel,
                        dt_eff,
                        a_in,
                        f_alpha,
                        f_color,
                        saturated,
                        prim_start,
                        prim_len,
                    });
                }
            }
            if saturated {
                break;
            }
        }
        i += 1;
    }
    (state.finish(background), state.a)
}

/// Spec-shaped single-ray entry point (builds the field cache itself; use
/// [`render`] for whole images).
pub fn integrate_ray(
    ray: &Ray,
    hits: &RayHitList,
    scene: &PrimitiveSet,
    opts: &RenderOptions,
) -> (Vec3, f64) {
    let fe = FieldEval::new(scene);
    let (c, a) = integrate_ray_hits(ray, hits, scene, &fe, opts, 0, None);
    (Vec3::from_array(c), a)
}

// ---------------------------------------------------------------------------
// Whole-image rendering

struct RowOut {
    color: Vec<f64>,
    coverage: Vec<f64>,
    tape: Option<TapeChunk>,
}

fn render_row(
    y: u32,
    camera: &Camera,
    scene: &PrimitiveSet,
    fe: &FieldEval,
    bvh: &Bvh,
    opts: &RenderOptions,
) -> Result<RowOut, RenderError> {
    let w = camera.width;
    let mut color = Vec::with_capacity(w as usize * 3);
    let mut coverage = Vec::with_capacity(w as usize);
    let mut tape = opts.record_tape.then(|| TapeChunk {
        samples: Vec::new(),
        prims: Vec::new(),
    });
    for x in 0..w {
        let ray = camera_ray(camera, (x as i64, y as i64), opts.near, opts.far)?;
        let hits = intersect(&ray, scene, bvh);
        let pixel = y * w + x;
        let (c, a) =
            integrate_ray_hits(&ray, &hits, scene, fe, opts, pixel, tape.as_mut());
        color.extend_from_slice(&c);
        coverage.push(a);
    }
    Ok(RowOut { color, coverage, tape })
}

/// Render through the BVH, parallel over rows. Rows are computed
/// independently and concatenated in row order, so the result (pixels and
/// tape) is identical for any thread count.
pub fn render(
    camera: &Camera,
    scene: &PrimitiveSet,
    bvh: &Bvh,
    opts: &RenderOptions,
) -> Result<RenderOutput, RenderError> {
    opts.validate()?;
    let fe = FieldEval::new(scene);
    let rows: Result<Vec<RowOut>, RenderError> = (0..camera.height)
        .into_par_iter()
        .map(|y| render_row(y, camera, scene, &fe, bvh, opts))
        .collect();
    let rows = rows?;
    assemble_rows(camera, scene, opts, rows)
}

fn assemble_rows(
    camera: &Camera,
    scene: &PrimitiveSet,
    opts: &RenderOptions,
    rows: Vec<RowOut>,
) -> Result<RenderOutput, RenderError> {
    let (w, h) = (camera.width, camera.height);
    let mut color = Vec::with_capacity((w * h) as usize * 3);
    let mut coverage = Vec::with_capacity((w * h) as usize);
    let mut tape = opts.record_tape.then(|| RenderTape {
        width: w,
        height: h,
        background: opts.effective_background(scene),
        fade: opts.fade,
        samples: Vec::new(),
        prims: Vec::new(),
    });
    for row in rows {
        color.extend_from_slice(&row.color);
        coverage.extend_from_slice(&row.coverage);
        if let (Some(tape), Some(chunk)) = (tape.as_mut(), row.tape) {
            let prim_offset = tape.prims.len() as u32;
            tape.samples.extend(chunk.samples.into_iter().map(|mut s| {
                s.prim_start += prim_offset;
                s
            }));
            tape.prims.extend(chunk.prims);
        }
    }
    Ok(RenderOutput {
        color: ImageBuffer::from_data(w, h, 3, color).map_err(RenderError::Geom)?,
        coverage: ImageBuffer::from_data(w, h, 1, coverage).map_err(RenderError::Geom)?,
        tape,
    })
}

/// Reference renderer: march the FULL [near, far] span of every ray on the
/// same step grid, evaluating the composed field over all primitives at every
/// cell midpoint — no BVH, no interval clipping.
pub fn render_dense_oracle(
    camera: &Camera,
    scene: &PrimitiveSet,
    opts: &RenderOptions,
) -> Result<RenderOutput, RenderError> {
    opts.validate()?;
    let fe = FieldEval::new(scene);
    let background = opts.effective_background(scene);
    let rows: Result<Vec<RowOut>, RenderError> = (0..camera.height)
        .into_par_iter()
        .map(|y| {
            let w = camera.width;
            let mut color = Vec::with_capacity(w as usize * 3);
            let mut coverage = Vec::with_capacity(w as usize);
            for x in 0..w {
                let ray = camera_ray(camera, (x as i64, y as i64), opts.near, opts.far)?;
                let mut state = RayState::START;
                for i in 0..opts.max_samples {
                    let Some((t_mid, dt_eff)) =
                        cell_geometry(ray.t_min, ray.t_max, opts.step, i)
                    else {
                        break;
                    };
                    let (f_color, f_alpha) = fe.eval_all(scene, ray.point_at(t_mid), &opts.fade);
                    if state.composite(f_color.to_array(), f_alpha, dt_eff) {
                        break;
                    }
                }
                color.extend_from_slice(&state.finish(background));
                coverage.push(state.a);
            }
            Ok(RowOut { color, coverage, tape: None })
        })
        .collect();
    let mut opts_no_tape = opts.clone();
    opts_no_tape.record_tape = false;
    assemble_rows(camera, scene, &opts_no_tape, rows?)
}

// ---------------------------------------------------------------------------
// Tape replay

/// Recompute the image from the tape and the scene payloads. Walks the exact
/// recorded sample sequence through the same compositing update, re-gathering
/// trilinear values from the stored weights, so the output is bitwise equal
/// to the recorded render.
pub fn replay_tape(tape: &RenderTape, scene: &PrimitiveSet) -> ImageBuffer {
    let (w, h) = (tape.width, tape.height);
    let mut data = Vec::with_capacity((w * h) as usize * 3);
    for _ in 0..w * h {
        data.extend_from_slice(&tape.background);
    }
    let mut img = ImageBuffer::from_data(w, h, 3, data).expect("finite background");
    let mut si = 0usize;
    while si < tape.samples.len() {
        let pixel = tape.samples[si].pixel;
        let mut state = RayState::START;
        while si < tape.samples.len() && tape.samples[si].pixel == pixel {
            let s = &tape.samples[si];
            let (f_color, f_alpha) = resample_field(tape, scene, s);
            let saturated = state.composite(f_color, f_alpha, s.dt_eff);
            debug_assert_eq!(saturated, s.saturated);
            si += 1;
            if saturated {
                // forward stopped here; any later records belong to other pixels
                break;
            }
        }
        let out = state.finish(tape.background);
        let base = pixel as usize * 3;
        img.data[base..base + 3].copy_from_slice(&out);
    }
    img
}

/// Re-gather one sample's composed field from stored trilinear weights,
/// matching the forward accumulation order exactly.
pub(crate) fn resample_field(
    tape: &RenderTape,
    scene: &PrimitiveSet,
    s: &SampleRecord,
) -> ([f64; 3], f64) {
    let mut f_color = [0.0; 3];
    let mut f_alpha = 0.0;
    let range = s.prim_start as usize..(s.prim_start + s.prim_len) as usize;
    for rec in &tape.prims[range] {
        let payload = &scene.primitives[rec.prim as usize].payload;
        let nodes = crate::scene::corner_nodes(payload.m(), rec.i0);
        let mut c = [0.0; 3];
        let mut a_raw = 0.0;
        for (w, node) in rec.weights.iter().zip(nodes) {
            a_raw += w * payload.alpha[node];
            let base = node * 3;
            c[0] += w * payload.rgb[base];
            c[1] += w * payload.rgb[base + 1];
            c[2] += w * payload.rgb[base + 2];
        }
        let a = a_raw * rec.fade;
        f_alpha += a;
        f_color[0] += a * c[0];
        f_color[1] += a * c[1];
        f_color[2] += a * c[2];
    }
    (f_color, f_alpha)
}

// ---------------------------------------------------------------------------
// Overlay

/// Deterministic, collision-free color for a primitive index (distinct for
/// all indices below 4096): an odd-multiplier permutation of the low 12 bits
/// spread across three 4-bit channels, lifted away from black.
pub fn palette_color(k: usize) -> [f64; 3] {
    let p = (k as u32).wrapping_mul(2_654_435_761) & 0xFFF;
    let nibbles = [p & 0xF, (p >> 4) & 0xF, (p >> 8) & 0xF];
    nibbles.map(|n| 0.15 + 0.85 * (n as f64 * 17.0) / 255.0)
}

/// Render with each primitive's color replaced by its palette color (alpha
/// untouched), for telling primitives apart in inspection imagery.
pub fn render_primitive_overlay(
    camera: &Camera,
    scene: &PrimitiveSet,
    bvh: &Bvh,
    opts: &RenderOptions,
) -> Result<RenderOutput, RenderError> {
    let mut recolored = scene.clone();
    for (k, prim) in recolored.primitives.iter_mut().enumerate() {
        let color = palette_color(k);
        let n = prim.payload.node_count();
        let mut rgb = Vec::with_capacity(n * 3);
        for _ in 0..n {
            rgb.extend_from_slice(&color);
        }
        prim.payload.rgb = rgb;
    }
    let mut opts = opts.clone();
    opts.record_tape = false;
    render(camera, &recolored, bvh, &opts)
}
