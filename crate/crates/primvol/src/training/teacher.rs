//! Procedural multi-view teacher: smooth blob scenes driven by a
//! low-dimensional latent code, rendered with the dense reference renderer
//! and written to disk as a manifest-backed dataset.
//!
//! Every scene parameter is a smooth (tanh/sigmoid of affine) function of the
//! latent vector, so the scene family is a well-posed distillation target:
//! the mapping from latent to image is continuous, and the ground truth is
//! known exactly.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{Camera, CameraRecord, ImageBuffer, Rotation, Vec3};
use crate::imageio::{read_pfm, write_pfm};
use crate::render::{render_dense_oracle, RenderOptions};
use crate::scene::{Payload, Primitive, PrimitiveSet};

use super::TrainError;

/// Configuration of the procedural teacher.
#[derive(Debug, Clone)]
pub struct TeacherSpec {
    /// Latent dimensionality (small: 2-8).
    pub latent_dim: usize,
    /// Number of latent draws (scenes).
    pub samples: usize,
    /// Views rendered per scene.
    pub views: usize,
    /// Image size.
    pub width: u32,
    pub height: u32,
    /// Blob slots that are always present.
    pub min_blobs: usize,
    /// Total blob slots; slots beyond `min_blobs` are smoothly gated by the
    /// latent code.
    pub max_blobs: usize,
    /// Per-axis blob half-extents are mapped into this range.
    pub size_range: (f64, f64),
    /// Camera orbit radius around the origin.
    pub orbit_radius: f64,
    /// Ray-march step used for the reference renders.
    pub step: f64,
    /// Everything (slot mappings and latent draws) derives from this seed.
    pub seed: u64,
}

impl TeacherSpec {
    pub fn new(latent_dim: usize, samples: usize, views: usize, width: u32, height: u32, seed: u64) -> TeacherSpec {
        TeacherSpec {
            latent_dim,
            samples,
            views,
            width,
            height,
            min_blobs: 3,
            max_blobs: 8,
            size_range: (0.08, 0.3),
            orbit_radius: 3.0,
            step: 0.04,
            seed,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.latent_dim == 0 || self.samples == 0 || self.views == 0 {
            return Err(TrainError::Invalid(
                "teacher spec needs latent_dim, samples, views >= 1".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(TrainError::Invalid("teacher spec needs a non-empty image".into()));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(TrainError::Invalid(format!(
                "blob slot counts {}..{} invalid",
                self.min_blobs, self.max_blobs
            )));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(TrainError::Invalid(format!("size range {lo}..{hi} invalid")));
        }
        if !(self.orbit_radius > 0.0) || !(self.step > 0.0) {
            return Err(TrainError::Invalid("orbit radius and step must be positive".into()));
        }
        Ok(())
    }
}

/// Background shared by all teacher renders.
pub const TEACHER_BACKGROUND: [f64; 3] = [0.08, 0.08, 0.1];

/// Grid resolution of blob payloads.
const BLOB_M: u32 = 8;
/// Raw affine outputs consumed per blob slot.
const RAWS_PER_SLOT: usize = 12;

/// One manifest line: an image on disk, the camera that rendered it, and
/// (when the dataset carries latents) the scene's latent code.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewRecord {
    pub image: String,
    pub camera: CameraRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
    /// Background color behind the rendered scene, when recorded. Uniform
    /// across the dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<[f64; 3]>,
}

/// A manifest-backed multi-view dataset. Image paths are relative to `root`.
#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    pub root: PathBuf,
    pub records: Vec<ViewRecord>,
}

impl MultiViewDataset {
    /// Validate the two dataset invariants: uniform resolution, and latents
    /// all present or all absent.
    pub fn validate(&self) -> Result<(), TrainError> {
        let Some(first) = self.records.first() else {
            return Err(TrainError::Invalid("dataset has no records".into()));
        };
        let (w, h) = (first.camera.width, first.camera.height);
        let has_latents = first.w.is_some();
        let latent_dim = first.w.as_ref().map(Vec::len);
        for (i, rec) in self.records.iter().enumerate() {
            if (rec.camera.width, rec.camera.height) != (w, h) {
                return Err(TrainError::Invalid(format!(
                    "record {i} is {}x{}, dataset is {w}x{h}",
                    rec.camera.width, rec.camera.height
                )));
            }
            if rec.w.is_some() != has_latents || rec.w.as_ref().map(Vec::len) != latent_dim {
                return Err(TrainError::Invalid(format!(
                    "record {i} breaks the all-or-none latent invariant"
                )));
            }
            if rec.background != first.background {
                return Err(TrainError::Invalid(format!(
                    "record {i} has background {:?}, dataset has {:?}",
                    rec.background, first.background
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.records.first().map(|r| r.camera.width).unwrap_or(0)
    }

    pub fn height(&self) -> u32 {
        self.records.first().map(|r| r.camera.height).unwrap_or(0)
    }

    pub fn has_latents(&self) -> bool {
        self.records.first().is_some_and(|r| r.w.is_some())
    }

    /// The recorded background color, when the manifest carries one.
    pub fn background(&self) -> Option<[f64; 3]> {
        self.records.first().and_then(|r| r.background)
    }

    /// Manifest path under the dataset root.
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    /// Write the manifest (one JSON record per line).
    pub fn save(&self) -> Result<(), TrainError> {
        self.validate()?;
        fs::create_dir_all(&self.root)?;
        let mut out = fs::File::create(self.manifest_path())?;
        for rec in &self.records {
            let line = serde_json::to_string(rec)
                .map_err(|e| TrainError::BadData(format!("manifest encode: {e}")))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Read a manifest written by [`MultiViewDataset::save`].
    pub fn load(manifest: &Path) -> Result<MultiViewDataset, TrainError> {
        let root = manifest
            .parent()
            .ok_or_else(|| TrainError::Invalid(format!("manifest {manifest:?} has no parent")))?
            .to_path_buf();
        let file = fs::File::open(manifest)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ViewRecord = serde_json::from_str(&line)
                .map_err(|e| TrainError::BadData(format!("manifest line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        let ds = MultiViewDataset { root, records };
        ds.validate()?;
        Ok(ds)
    }

    /// Load one record's image.
    pub fn load_image(&self, index: usize) -> Result<ImageBuffer, TrainError> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| TrainError::Invalid(format!("record {index} out of range")))?;
        let img = read_pfm(&self.root.join(&rec.image))?;
        if (img.width, img.height) != (rec.camera.width, rec.camera.height) {
            return Err(TrainError::BadData(format!(
                "image {} is {}x{}, manifest says {}x{}",
                rec.image, img.width, img.height, rec.camera.width, rec.camera.height
            )));
        }
        Ok(img)
    }

    /// Camera for one record.
    pub fn camera(&self, index: usize) -> Result<Camera, TrainError> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| TrainError::Invalid(format!("record {index} out of range")))?;
        Ok(Camera::try_from(&rec.camera)?)
    }

    /// Group record indices by latent code (consecutive records with equal
    /// latents form one scene). Errors if the dataset has no latents.
    pub fn latent_groups(&self) -> Result<Vec<(Vec<f64>, Vec<usize>)>, TrainError> {
        if !self.has_latents() {
            return Err(TrainError::Invalid("dataset has no latent codes".into()));
        }
        let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            let w = rec.w.as_ref().expect("validated all-present");
            match groups.last_mut() {
                Some((gw, idxs)) if gw == w => idxs.push(i),
                _ => groups.push((w.clone(), vec![i])),
            }
        }
        Ok(groups)
    }
}

/// Smooth scene synthesis: the latent drives every blob parameter through a
/// fixed random affine map followed by tanh/sigmoid squashing.
#[derive(Debug, Clone)]
pub struct BlobFamily {
    spec: TeacherSpec,
    /// Per-slot affine maps: `raw = A_j w + b_j`, row-major
    /// `[RAWS_PER_SLOT x latent_dim]`.
    slot_a: Vec<Vec<f64>>,
    slot_b: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl BlobFamily {
    /// Derive the slot mappings from the teacher seed.
    pub fn new(spec: &TeacherSpec) -> Result<BlobFamily, TrainError> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0x7465_6163_6865_7221);
        let mut slot_a = Vec::with_capacity(spec.max_blobs);
        let mut slot_b = Vec::with_capacity(spec.max_blobs);
        for _ in 0..spec.max_blobs {
            slot_a.push(
                (0..RAWS_PER_SLOT * spec.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            slot_b.push((0..RAWS_PER_SLOT).map(|_| rng.gen_range(-0.5..0.5)).collect());
        }
        Ok(BlobFamily { spec: spec.clone(), slot_a, slot_b })
    }

    /// Build the scene for one latent code. Pure: no RNG involved.
    pub fn scene(&self, w: &[f64]) -> Result<PrimitiveSet, TrainError> {
        if w.len() != self.spec.latent_dim {
            return Err(TrainError::Shape(format!(
                "latent has {} dims, teacher family expects {}",
                w.len(),
                self.spec.latent_dim
            )));
        }
        let (size_lo, size_hi) = self.spec.size_range;
        let mut prims = Vec::with_capacity(self.spec.max_blobs);
        for slot in 0..self.spec.max_blobs {
            let a = &self.slot_a[slot];
            let b = &self.slot_b[slot];
            let mut raw = [0.0; RAWS_PER_SLOT];
            for (i, r) in raw.iter_mut().enumerate() {
                let mut acc = b[i];
                for (j, &wj) in w.iter().enumerate() {
                    acc += a[i * self.spec.latent_dim + j] * wj;
                }
                *r = acc;
            }

            let center = Vec3::new(
                0.75 * raw[0].tanh(),
                0.75 * raw[1].tanh(),
                0.75 * raw[2].tanh(),
            );
            let rgb = [
                0.5 + 0.45 * raw[4].tanh(),
                0.5 + 0.45 * raw[5].tanh(),
                0.5 + 0.45 * raw[6].tanh(),
            ];
            let gate = if slot < self.spec.min_blobs {
                1.0
            } else {
                sigmoid(2.0 * raw[11])
            };
            let amplitude = (1.4 + 0.8 * raw[7].tanh()) * gate;
            let scale = Vec3::new(
                size_lo + (size_hi - size_lo) * sigmoid(raw[3] + 0.5 * raw[8]),
                size_lo + (size_hi - size_lo) * sigmoid(raw[3] + 0.5 * raw[9]),
                size_lo + (size_hi - size_lo) * sigmoid(raw[3] + 0.5 * raw[10]),
            );

            prims.push(Primitive::new(
                center,
                Rotation::IDENTITY,
                scale,
                radial_gaussian_payload(BLOB_M, rgb, amplitude),
            )?);
        }
        Ok(PrimitiveSet::new(prims, TEACHER_BACKGROUND)?)
    }

    /// Orbit camera `view` of `views` for this family.
    pub fn camera(&self, view: usize) -> Result<Camera, TrainError> {
        let spec = &self.spec;
        let frac = view as f64 / spec.views as f64;
        let azimuth = std::f64::consts::TAU * frac;
        let elevation = 0.3 * (std::f64::consts::TAU * frac + 0.7).sin();
        let r = spec.orbit_radius;
        let eye = Vec3::new(
            r * elevation.cos() * azimuth.cos(),
            r * elevation.sin(),
            r * elevation.cos() * azimuth.sin(),
        );
        Ok(Camera::look_at(
            eye,
            Vec3::ZERO,
            Vec3::new(0.0, -1.0, 0.0),
            spec.width as f64,
            spec.width,
            spec.height,
        )?)
    }

    /// Render options matched to the orbit geometry (rays clipped to a band
    /// around the scene so the dense reference renderer stays affordable).
    pub fn render_options(&self) -> RenderOptions {
        let r = self.spec.orbit_radius;
        RenderOptions {
            step: self.spec.step,
            near: (r - 1.8).max(0.01),
            far: r + 1.8,
            ..RenderOptions::default()
        }
    }

    /// Draw the dataset's latent codes (uniform in [-1,1]^d), deterministic
    /// in the teacher seed.
    pub fn draw_latents(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.spec.seed ^ 0x6c61_7465_6e74_7321);
        (0..self.spec.samples)
            .map(|_| (0..self.spec.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }
}

/// An `m^3` payload holding a radial Gaussian density (peak `amplitude` at
/// the block center, falling smoothly toward the corners) and a constant
/// color.
pub fn radial_gaussian_payload(m: u32, rgb: [f64; 3], amplitude: f64) -> Payload {
    let n = (m as usize).pow(3);
    let mut rgb_data = Vec::with_capacity(n * 3);
    let mut alpha = Vec::with_capacity(n);
    let sigma2 = 2.0 * 0.45 * 0.45;
    for iz in 0..m {
        for iy in 0..m {
            for ix in 0..m {
                let node = |i: u32| 2.0 * (i as f64 + 0.5) / m as f64 - 1.0;
                let (lx, ly, lz) = (node(ix), node(iy), node(iz));
                let r2 = lx * lx + ly * ly + lz * lz;
                alpha.push(amplitude * (-r2 / sigma2).exp());
                rgb_data.extend_from_slice(&rgb);
            }
        }
    }
    Payload::new(m, rgb_data, alpha).expect("constructed in range")
}

/// Synthesize and render the full teacher dataset into `out_dir`, writing
/// one PFM per view plus `manifest.jsonl`. Pure function of the `TeacherSpec`.
pub fn make_teacher(spec: &TeacherSpec, out_dir: &Path) -> Result<MultiViewDataset, TrainError> {
    let family = BlobFamily::new(spec)?;
    let latents = family.draw_latents();
    let opts = family.render_options();

    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;

    let mut records = Vec::with_capacity(spec.samples * spec.views);
    for (s, w) in latents.iter().enumerate() {
        let scene = family.scene(w)?;
        for v in 0..spec.views {
            let camera = family.camera(v)?;
            let out = render_dense_oracle(&camera, &scene, &opts)?;
            let rel = format!("images/s{s:04}_v{v:03}.pfm");
            write_pfm(&out.color, &out_dir.join(&rel))?;
            records.push(ViewRecord {
                image: rel,
                camera: CameraRecord::from(&camera),
                w: Some(w.clone()),
                background: Some(TEACHER_BACKGROUND),
            });
        }
    }

    let ds = MultiViewDataset { root: out_dir.to_path_buf(), records };
    ds.save()?;
    Ok(ds)
}
