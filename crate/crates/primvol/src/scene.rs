//! Scene representation: primitive payloads, delta composition over guide
//! mesh anchors, local/world transforms, trilinear payload sampling, the
//! composed volumetric field, and scene serialization.

use crate::geom::{Mat3, Rotation, Vec3};
use crate::mesh::AnchorSet;
use crate::render::FadeParams;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Smallest composed scale per axis; keeps world_to_local finite.
pub const SCALE_FLOOR: f64 = 1e-4;

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("count mismatch: {anchors} anchors, {deltas} deltas, {payloads} payloads")]
    CountMismatch { anchors: usize, deltas: usize, payloads: usize },
    #[error("invalid payload: {0}")]
    BadPayload(String),
    #[error("invalid primitive: {0}")]
    BadPrimitive(String),
    #[error("scene must contain at least one primitive")]
    Empty,
    #[error("scene io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported scene format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt scene file: {0}")]
    Corrupt(String),
}

// ---------------------------------------------------------------------------
// Payload

/// Voxel payload of one primitive: an M^3 grid of straight rgb in [0,1] and
/// non-negative alpha (density per world unit). Node (ix, iy, iz) lives at
/// linear index `(iz*M + iy)*M + ix`; rgb is interleaved 3-wide.
#[derive(Debug, Clone)]
pub struct Payload {
    m: u32,
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Payload {
    pub fn new(m: u32, rgb: Vec<f64>, alpha: Vec<f64>) -> Result<Payload, SceneError> {
        let p = Payload { m, rgb, alpha };
        p.validate()?;
        Ok(p)
    }

    /// Grid filled with one color and one density.
    pub fn constant(m: u32, rgb: [f64; 3], alpha: f64) -> Payload {
        let n = (m as usize).pow(3);
        let mut rgb_data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            rgb_data.extend_from_slice(&rgb);
        }
        Payload { m, rgb: rgb_data, alpha: vec![alpha; n] }
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn node_count(&self) -> usize {
        (self.m as usize).pow(3)
    }

    pub fn node_index(&self, ix: u32, iy: u32, iz: u32) -> usize {
        ((iz * self.m + iy) * self.m + ix) as usize
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.m == 0 {
            return Err(SceneError::BadPayload("grid resolution M must be >= 1".into()));
        }
        let n = self.node_count();
        if self.rgb.len() != n * 3 {
            return Err(SceneError::BadPayload(format!(
                "rgb has {} values, expected {}",
                self.rgb.len(),
                n * 3
            )));
        }
        if self.alpha.len() != n {
            return Err(SceneError::BadPayload(format!(
                "alpha has {} values, expected {n}",
                self.alpha.len()
            )));
        }
        for (i, v) in self.rgb.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(SceneError::BadPayload(format!("rgb[{i}] = {v} outside [0,1]")));
            }
        }
        for (i, v) in self.alpha.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(SceneError::BadPayload(format!("alpha[{i}] = {v} invalid")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Primitive / PrimitiveSet / DeltaSet

/// Posed, scaled, oriented voxel block. `scale` holds half-extents in world
/// units: the box spans local coordinates [-1,1]^3.
#[derive(Debug, Clone)]
pub struct Primitive {
    pub position: Vec3,
    pub rotation: Rotation,
    pub scale: Vec3,
    pub payload: Payload,
}

impl Primitive {
    pub fn new(
        position: Vec3,
        rotation: Rotation,
        scale: Vec3,
        payload: Payload,
    ) -> Result<Primitive, SceneError> {
        if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0) || !scale.is_finite() {
            return Err(SceneError::BadPrimitive(format!(
                "scale must be positive, got {scale:?}"
            )));
        }
        if !position.is_finite() || !rotation.norm().is_finite() {
            return Err(SceneError::BadPrimitive("non-finite pose".into()));
        }
        payload.validate()?;
        Ok(Primitive { position, rotation, scale, payload })
    }
}

/// The composed scene all renderers consume.
#[derive(Debug, Clone)]
pub struct PrimitiveSet {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl PrimitiveSet {
    pub fn new(primitives: Vec<Primitive>, background: [f64; 3]) -> Result<PrimitiveSet, SceneError> {
        if primitives.is_empty() {
            return Err(SceneError::Empty);
        }
        Ok(PrimitiveSet { primitives, background })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

/// Per-primitive pose offsets applied on top of anchors: position shift,
/// axis-angle rotation (|delta_r| < pi), additive scale.
#[derive(Debug, Clone)]
pub struct DeltaSet {
    pub dt: Vec<Vec3>,
    pub dr: Vec<Vec3>,
    pub ds: Vec<Vec3>,
}

impl DeltaSet {
    pub fn zeros(n: usize) -> DeltaSet {
        DeltaSet {
            dt: vec![Vec3::ZERO; n],
            dr: vec![Vec3::ZERO; n],
            ds: vec![Vec3::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.dt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dt.is_empty()
    }
}

/// Returned by [`compose`]; notes whether any composed scale hit the floor.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComposeReport {
    pub scale_clamped: bool,
    pub clamped_count: usize,
}

fn composed_pose(
    anchors: &AnchorSet,
    deltas: &DeltaSet,
    k: usize,
    report: &mut ComposeReport,
) -> (Vec3, Rotation, Vec3) {
    let t = anchors.t_hat[k] + deltas.dt[k];
    let r = anchors.r_hat[k].compose(&Rotation::from_axis_angle(deltas.dr[k]));
    let raw = anchors.s_hat + deltas.ds[k];
    let s = raw.max_comp(Vec3::splat(SCALE_FLOOR));
    if s.x != raw.x || s.y != raw.y || s.z != raw.z {
        report.scale_clamped = true;
        report.clamped_count += 1;
    }
    (t, r, s)
}

/// Compose primitives from anchors, deltas and payloads:
/// t_k = t̂_k + δt_k, R_k = R̂_k · exp(δr_k), s_k = max(ŝ + δs_k, floor).
pub fn compose(
    anchors: &AnchorSet,
    deltas: &DeltaSet,
    payloads: Vec<Payload>,
    background: [f64; 3],
) -> Result<(PrimitiveSet, ComposeReport), SceneError> {
    if anchors.len() != deltas.len() || anchors.len() != payloads.len() {
        return Err(SceneError::CountMismatch {
            anchors: anchors.len(),
            deltas: deltas.len(),
            payloads: payloads.len(),
        });
    }
    let mut report = ComposeReport::default();
    let mut primitives = Vec::with_capacity(anchors.len());
    for (k, payload) in payloads.into_iter().enumerate() {
        let (t, r, s) = composed_pose(anchors, deltas, k, &mut report);
        primitives.push(Primitive::new(t, r, s, payload)?);
    }
    Ok((PrimitiveSet::new(primitives, background)?, report))
}

/// Recompute only the poses of an existing scene from fresh deltas, leaving
/// payload storage in place (the optimizer's inner-loop path).
pub fn apply_deltas(
    scene: &mut PrimitiveSet,
    anchors: &AnchorSet,
    deltas: &DeltaSet,
) -> Result<ComposeReport, SceneError> {
    if anchors.len() != deltas.len() || anchors.len() != scene.len() {
        return Err(SceneError::CountMismatch {
            anchors: anchors.len(),
            deltas: deltas.len(),
            payloads: scene.len(),
        });
    }
    let mut report = ComposeReport::default();
    for k in 0..scene.len() {
        let (t, r, s) = composed_pose(anchors, deltas, k, &mut report);
        let p = &mut scene.primitives[k];
        p.position = t;
        p.rotation = r;
        p.scale = s;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Transforms

/// World point -> primitive coordinates; interior iff all |components| <= 1.
pub fn world_to_local(p: &Primitive, x: Vec3) -> Vec3 {
    let y = p.rotation.inverse().rotate(x - p.position);
    y.div_comp(p.scale)
}

/// Primitive coordinates -> world point.
pub fn local_to_world(p: &Primitive, local: Vec3) -> Vec3 {
    p.position + p.rotation.rotate(local.hadamard(p.scale))
}

// ---------------------------------------------------------------------------
// Trilinear sampling

/// Per-axis trilinear setup: node index i0, fraction in [0,1], and the
/// derivative of the fraction w.r.t. the local coordinate (0 in the clamped
/// outer half-cells, M/2 in the interior).
#[inline]
pub fn trilerp_axis(m: u32, l: f64) -> (u32, f64, f64) {
    if m == 1 {
        return (0, 0.0, 0.0);
    }
    let g = (l + 1.0) * 0.5 * m as f64 - 0.5;
    let top = (m - 1) as f64;
    if g <= 0.0 {
        (0, 0.0, 0.0)
    } else if g >= top {
        (m - 2, 1.0, 0.0)
    } else {
        let i0 = g.floor();
        (i0 as u32, g - i0, 0.5 * m as f64)
    }
}

/// Corner weights in the fixed node order
/// (0,0,0) (1,0,0) (0,1,0) (1,1,0) (0,0,1) (1,0,1) (0,1,1) (1,1,1).
/// Every accumulation over corners must walk this order so results are
/// reproducible bit for bit.
#[inline]
pub fn trilerp_weights(frac: [f64; 3]) -> [f64; 8] {
    let [fx, fy, fz] = frac;
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    [
        gx * gy * gz,
        fx * gy * gz,
        gx * fy * gz,
        fx * fy * gz,
        gx * gy * fz,
        fx * gy * fz,
        gx * fy * fz,
        fx * fy * fz,
    ]
}

/// Corner offsets matching [`trilerp_weights`] order.
pub const CORNER_OFFSETS: [(u32, u32, u32); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (0, 1, 0),
    (1, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (0, 1, 1),
    (1, 1, 1),
];

/// Linear node indices of the 8 interpolation corners, in fixed order.
#[inline]
pub fn corner_nodes(m: u32, i0: [u32; 3]) -> [usize; 8] {
    let mut out = [0usize; 8];
    for (slot, (dx, dy, dz)) in out.iter_mut().zip(CORNER_OFFSETS) {
        let ix = (i0[0] + dx).min(m - 1);
        let iy = (i0[1] + dy).min(m - 1);
        let iz = (i0[2] + dz).min(m - 1);
        *slot = ((iz * m + iy) * m + ix) as usize;
    }
    out
}

/// Trilinear payload lookup. Outside [-1,1]^3 returns zeros; inside, values
/// are cell-centered-node interpolation, exact at node centers.
pub fn sample_payload(payload: &Payload, local: Vec3) -> ([f64; 3], f64) {
    if local.x.abs() > 1.0 || local.y.abs() > 1.0 || local.z.abs() > 1.0 {
        return ([0.0; 3], 0.0);
    }
    let m = payload.m;
    let (ix, fx, _) = trilerp_axis(m, local.x);
    let (iy, fy, _) = trilerp_axis(m, local.y);
    let (iz, fz, _) = trilerp_axis(m, local.z);
    let nodes = corner_nodes(m, [ix, iy, iz]);
    let weights = trilerp_weights([fx, fy, fz]);
    let mut rgb = [0.0; 3];
    let mut alpha = 0.0;
    for (w, node) in weights.iter().zip(nodes) {
        alpha += w * payload.alpha[node];
        let base = node * 3;
        rgb[0] += w * payload.rgb[base];
        rgb[1] += w * payload.rgb[base + 1];
        rgb[2] += w * payload.rgb[base + 2];
    }
    (rgb, alpha)
}

// ---------------------------------------------------------------------------
// Composed field

/// Everything the backward pass must know about one primitive's contribution
/// at one sample point.
#[derive(Debug, Clone)]
pub struct PrimSampleRecord {
    pub prim: u32,
    pub local: [f64; 3],
    /// Trilinear alpha before the fade window.
    pub alpha_raw: f64,
    pub fade: f64,
    /// Trilinear straight color.
    pub color: [f64; 3],
    pub i0: [u32; 3],
    pub frac: [f64; 3],
    pub dfrac: [f64; 3],
    pub weights: [f64; 8],
}

/// Cached per-primitive transform data for repeated field evaluation.
/// Rebuild after any pose change.
pub struct FieldEval {
    rt: Vec<Mat3>, // inverse (transposed) rotations
    position: Vec<Vec3>,
    inv_scale: Vec<Vec3>,
}

impl FieldEval {
    pub fn new(scene: &PrimitiveSet) -> FieldEval {
        let n = scene.len();
        let mut rt = Vec::with_capacity(n);
        let mut position = Vec::with_capacity(n);
        let mut inv_scale = Vec::with_capacity(n);
        for p in &scene.primitives {
            rt.push(p.rotation.to_matrix().transpose());
            position.push(p.position);
            inv_scale.push(Vec3::ONE.div_comp(p.scale));
        }
        FieldEval { rt, position, inv_scale }
    }

    /// Local coordinates of `x` in primitive `k`, or None if outside the box.
    /// Early-exits per axis, so interior points cost all three rows but far
    /// points usually cost one.
    #[inline]
    fn local_if_inside(&self, k: usize, x: Vec3) -> Option<Vec3> {
        let d = x - self.position[k];
        let rt = &self.rt[k].rows;
        let inv_s = self.inv_scale[k];
        let lx = (rt[0][0] * d.x + rt[0][1] * d.y + rt[0][2] * d.z) * inv_s.x;
        if lx.abs() > 1.0 {
            return None;
        }
        let ly = (rt[1][0] * d.x + rt[1][1] * d.y + rt[1][2] * d.z) * inv_s.y;
        if ly.abs() > 1.0 {
            return None;
        }
        let lz = (rt[2][0] * d.x + rt[2][1] * d.y + rt[2][2] * d.z) * inv_s.z;
        if lz.abs() > 1.0 {
            return None;
        }
        Some(Vec3::new(lx, ly, lz))
    }

    #[inline]
    fn accumulate_prim(
        &self,
        scene: &PrimitiveSet,
        k: usize,
        x: Vec3,
        fade: &FadeParams,
        color: &mut [f64; 3],
        alpha: &mut f64,
        records: Option<&mut Vec<PrimSampleRecord>>,
    ) {
        let Some(local) = self.local_if_inside(k, x) else {
            return;
        };
        let payload = &scene.primitives[k].payload;
        let m = payload.m();
        let (ix, fx, dfx) = trilerp_axis(m, local.x);
        let (iy, fy, dfy) = trilerp_axis(m, local.y);
        let (iz, fz, dfz) = trilerp_axis(m, local.z);
        let nodes = corner_nodes(m, [ix, iy, iz]);
        let weights = trilerp_weights([fx, fy, fz]);
        let mut c = [0.0; 3];
        let mut a_raw = 0.0;
        for (w, node) in weights.iter().zip(nodes) {
            a_raw += w * payload.alpha[node];
            let base = node * 3;
            c[0] += w * payload.rgb[base];
            c[1] += w * payload.rgb[base + 1];
            c[2] += w * payload.rgb[base + 2];
        }
        let phi = fade.weight(local.to_array());
        let a = a_raw * phi;
        *alpha += a;
        color[0] += a * c[0];
        color[1] += a * c[1];
        color[2] += a * c[2];
        if let Some(records) = records {
            records.push(PrimSampleRecord {
                prim: k as u32,
                local: local.to_array(),
                alpha_raw: a_raw,
                fade: phi,
                color: c,
                i0: [ix, iy, iz],
                frac: [fx, fy, fz],
                dfrac: [dfx, dfy, dfz],
                weights,
            });
        }
    }

    /// Composed field over all primitives: premultiplied color and alpha.
    pub fn eval_all(&self, scene: &PrimitiveSet, x: Vec3, fade: &FadeParams) -> (Vec3, f64) {
        let mut color = [0.0; 3];
        let mut alpha = 0.0;
        for k in 0..scene.len() {
            self.accumulate_prim(scene, k, x, fade, &mut color, &mut alpha, None);
        }
        (Vec3::from_array(color), alpha)
    }

    /// Composed field over a candidate subset (must be sorted ascending and
    /// contain every primitive whose box holds `x`; extra candidates add
    /// exact zeros). Optionally records per-primitive sample details.
    pub fn eval_subset(
        &self,
        scene: &PrimitiveSet,
        x: Vec3,
        fade: &FadeParams,
        candidates: &[u32],
        mut records: Option<&mut Vec<PrimSampleRecord>>,
    ) -> (Vec3, f64) {
        let mut color = [0.0; 3];
        let mut alpha = 0.0;
        for &k in candidates {
            self.accumulate_prim(
                scene,
                k as usize,
                x,
                fade,
                &mut color,
                &mut alpha,
                records.as_deref_mut(),
            );
        }
        (Vec3::from_array(color), alpha)
    }
}

/// Composed volumetric field at a world point: premultiplied color
/// (sum over containing primitives of a_k * c_k) and alpha (sum of a_k),
/// where a_k is fade-weighted trilinear density.
pub fn field_eval(scene: &PrimitiveSet, x: Vec3, fade: &FadeParams) -> (Vec3, f64) {
    FieldEval::new(scene).eval_all(scene, x, fade)
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    version: u32,
    n_prim: usize,
    m: Vec<u32>,
    background: [f64; 3],
    primitives: Vec<PoseRecord>,
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    t: [f64; 3],
    r: [f64; 4],
    s: [f64; 3],
}

/// Write a scene: one JSON header line, then a little-endian f64 payload
/// block (rgb then alpha, primitive-major).
pub fn save_scene(scene: &PrimitiveSet, path: &Path) -> Result<(), SceneError> {
    let header = SceneHeader {
        version: SCENE_FORMAT_VERSION,
        n_prim: scene.len(),
        m: scene.primitives.iter().map(|p| p.payload.m()).collect(),
        background: scene.background,
        primitives: scene
            .primitives
            .iter()
            .map(|p| PoseRecord {
                t: p.position.to_array(),
                r: [p.rotation.w, p.rotation.x, p.rotation.y, p.rotation.z],
                s: p.scale.to_array(),
            })
            .collect(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for p in &scene.primitives {
        for v in &p.payload.rgb {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &p.payload.alpha {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<PrimitiveSet, SceneError> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: SceneHeader = serde_json::from_str(header_line.trim_end())?;
    if header.version != SCENE_FORMAT_VERSION {
        return Err(SceneError::Version {
            found: header.version,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    if header.primitives.len() != header.n_prim || header.m.len() != header.n_prim {
        return Err(SceneError::Corrupt(format!(
            "header claims {} primitives but lists {} poses / {} resolutions",
            header.n_prim,
            header.primitives.len(),
            header.m.len()
        )));
    }
    let mut primitives = Vec::with_capacity(header.n_prim);
    for (k, pose) in header.primitives.iter().enumerate() {
        let m = header.m[k];
        if m == 0 {
            return Err(SceneError::Corrupt(format!("primitive {k} has M = 0")));
        }
        let n = (m as usize).pow(3);
        let mut rgb = vec![0.0; n * 3];
        let mut alpha = vec![0.0; n];
        read_f64_block(&mut reader, &mut rgb, k, "rgb")?;
        read_f64_block(&mut reader, &mut alpha, k, "alpha")?;
        let rotation = Rotation {
            w: pose.r[0],
            x: pose.r[1],
            y: pose.r[2],
            z: pose.r[3],
        };
        primitives.push(Primitive::new(
            Vec3::from_array(pose.t),
            rotation,
            Vec3::from_array(pose.s),
            Payload::new(m, rgb, alpha)?,
        )?);
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(SceneError::Corrupt("trailing bytes after payload block".into()));
    }
    PrimitiveSet::new(primitives, header.background)
}

fn read_f64_block(
    reader: &mut impl Read,
    out: &mut [f64],
    prim: usize,
    what: &str,
) -> Result<(), SceneError> {
    let mut buf = vec![0u8; out.len() * 8];
    reader.read_exact(&mut buf).map_err(|_| {
        SceneError::Corrupt(format!("payload block truncated in primitive {prim} {what}"))
    })?;
    for (i, chunk) in buf.chunks_exact(8).enumerate() {
        out[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}
