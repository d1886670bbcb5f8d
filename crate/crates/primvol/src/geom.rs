//! Core geometry and imaging types: vectors, rotations, cameras, rays and
//! float image buffers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("pixel ({0}, {1}) outside resolution {2}x{3}")]
    PixelOutOfBounds(i64, i64, u32, u32),
    #[error("image shape mismatch: {0}x{1}x{2} vs {3}x{4}x{5}")]
    ShapeMismatch(u32, u32, u8, u32, u32, u8),
    #[error("image data contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("image data length {0} does not match {1}x{2}x{3}")]
    BadDataLength(usize, u32, u32, u8),
    #[error("channel count {0} not one of 1, 3, 4")]
    BadChannelCount(u8),
    #[error("matrix is not a proper rotation (det or orthonormality off by {0:.3e})")]
    NotARotation(f64),
    #[error("invalid camera: {0}")]
    BadCamera(String),
    #[error("near/far bounds invalid: near={0}, far={1}")]
    BadRayBounds(f64, f64),
}

// ---------------------------------------------------------------------------
// Vec3

/// 3D vector in world units (or unitless for directions).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const ONE: Vec3 = Vec3 { x: 1.0, y: 1.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Vec3::new(v, v, v)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    /// Componentwise product.
    pub fn hadamard(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    /// Componentwise quotient.
    pub fn div_comp(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x / o.x, self.y / o.y, self.z / o.z)
    }

    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn max_component(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn min_comp(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_comp(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn component(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn set_component(&mut self, axis: usize, v: f64) {
        match axis {
            0 => self.x = v,
            1 => self.y = v,
            _ => self.z = v,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl std::ops::AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

// ---------------------------------------------------------------------------
// Mat3

/// Row-major 3x3 matrix. Mostly used as a cached form of a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub rows: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Mat3 {
        Mat3 { rows: [r0, r1, r2] }
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        Mat3 {
            rows: [
                [c0.x, c1.x, c2.x],
                [c0.y, c1.y, c2.y],
                [c0.z, c1.z, c2.z],
            ],
        }
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3::new(self.rows[0][j], self.rows[1][j], self.rows[2][j])
    }

    pub fn transpose(&self) -> Mat3 {
        let r = &self.rows;
        Mat3::from_rows(
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        )
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let r = &self.rows;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.rows[i][k] * o.rows[k][j]).sum();
            }
        }
        Mat3 { rows: out }
    }

    pub fn det(&self) -> f64 {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Inverse via the adjugate; `None` when the determinant is within 1e-12
    /// of zero.
    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        if d.abs() < 1e-12 {
            return None;
        }
        let r = &self.rows;
        let cof = |i: usize, j: usize| -> f64 {
            let (a, b) = ((i + 1) % 3, (i + 2) % 3);
            let (c, e) = ((j + 1) % 3, (j + 2) % 3);
            r[a][c] * r[b][e] - r[a][e] * r[b][c]
        };
        // adjugate = transpose of the cofactor matrix
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = cof(j, i) / d;
            }
        }
        Some(Mat3 { rows: out })
    }

    /// Skew-symmetric cross-product matrix of `v`.
    pub fn skew(v: Vec3) -> Mat3 {
        Mat3::from_rows([0.0, -v.z, v.y], [v.z, 0.0, -v.x], [-v.y, v.x, 0.0])
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut m = *self;
        for row in m.rows.iter_mut() {
            for c in row.iter_mut() {
                *c *= s;
            }
        }
        m
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut m = *self;
        for (i, row) in m.rows.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                *c += o.rows[i][j];
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// Rotation

/// Rotation stored as a unit quaternion (w, x, y, z).
///
/// `q` and `-q` describe the same rotation; comparisons go through
/// [`Rotation::approx_eq`] or [`Rotation::angle_to`], never field equality.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Rotation {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Rotation {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Rotation { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    /// Exponential map: axis-angle vector with angle = |v| radians.
    /// Angles are clamped to just below pi; |v| -> 0 yields the identity
    /// continuously.
    pub fn from_axis_angle(v: Vec3) -> Rotation {
        let angle = v.norm();
        if angle < 1e-12 {
            // sin(a/2)/a ~ 1/2 to double precision here
            return Rotation::renormalized(1.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z);
        }
        let clamped = angle.min(std::f64::consts::PI - 1e-9);
        let half = 0.5 * clamped;
        let k = half.sin() / angle;
        Rotation::renormalized(half.cos(), v.x * k, v.y * k, v.z * k)
    }

    /// Log map, inverse of [`Rotation::from_axis_angle`] for angles below pi.
    pub fn to_axis_angle(&self) -> Vec3 {
        // force w >= 0 so the angle lands in [0, pi]
        let (w, x, y, z) = if self.w < 0.0 {
            (-self.w, -self.x, -self.y, -self.z)
        } else {
            (self.w, self.x, self.y, self.z)
        };
        let sin_half = (x * x + y * y + z * z).sqrt();
        if sin_half < 1e-12 {
            return Vec3::new(2.0 * x, 2.0 * y, 2.0 * z);
        }
        let angle = 2.0 * sin_half.atan2(w);
        let k = angle / sin_half;
        Vec3::new(x * k, y * k, z * k)
    }

    /// Hamilton product a*b (apply `b` first, then `a`), renormalized.
    pub fn compose(&self, b: &Rotation) -> Rotation {
        let a = self;
        Rotation::renormalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        self.to_matrix().mul_vec(v)
    }

    pub fn to_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::from_rows(
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        )
    }

    /// Build from a proper rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &Mat3) -> Result<Rotation, GeomError> {
        let ortho_err = {
            let should_be_id = m.mul_mat(&m.transpose());
            let mut e: f64 = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let target = if i == j { 1.0 } else { 0.0 };
                    e = e.max((should_be_id.rows[i][j] - target).abs());
                }
            }
            e.max((m.det() - 1.0).abs())
        };
        if ortho_err > 1e-6 {
            return Err(GeomError::NotARotation(ortho_err));
        }
        let r = &m.rows;
        let trace = r[0][0] + r[1][1] + r[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            (
                0.25 * s,
                (r[2][1] - r[1][2]) / s,
                (r[0][2] - r[2][0]) / s,
                (r[1][0] - r[0][1]) / s,
            )
        } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
            let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
            (
                (r[2][1] - r[1][2]) / s,
                0.25 * s,
                (r[0][1] + r[1][0]) / s,
                (r[0][2] + r[2][0]) / s,
            )
        } else if r[1][1] > r[2][2] {
            let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
            (
                (r[0][2] - r[2][0]) / s,
                (r[0][1] + r[1][0]) / s,
                0.25 * s,
                (r[1][2] + r[2][1]) / s,
            )
        } else {
            let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
            (
                (r[1][0] - r[0][1]) / s,
                (r[0][2] + r[2][0]) / s,
                (r[1][2] + r[2][1]) / s,
                0.25 * s,
            )
        };
        Ok(Rotation::renormalized(q.0, q.1, q.2, q.3))
    }

    /// Angle in radians between two rotations (0 when equal up to sign).
    pub fn angle_to(&self, o: &Rotation) -> f64 {
        // relative rotation, measured with atan2 so tiny angles stay accurate
        let r = self.inverse().compose(o);
        let sin_half = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
        2.0 * sin_half.atan2(r.w.abs())
    }

    pub fn approx_eq(&self, o: &Rotation, tol: f64) -> bool {
        self.angle_to(o) <= tol
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Compose two rotations: returns a*b (b applied first), renormalized.
pub fn rotation_compose(a: &Rotation, b: &Rotation) -> Rotation {
    a.compose(b)
}

/// Right Jacobian of SO(3) at `omega`: exp(omega + d) ~ exp(omega) * exp(J_r(omega) d).
///
/// Used to pull a gradient expressed in the right tangent at the current
/// rotation back onto the axis-angle parameter itself.
pub fn so3_right_jacobian(omega: Vec3) -> Mat3 {
    let theta = omega.norm();
    let sk = Mat3::skew(omega);
    let sk2 = sk.mul_mat(&sk);
    if theta < 1e-5 {
        // J_r = I - 1/2 [w]x + 1/6 [w]x^2 + O(theta^3)
        return Mat3::IDENTITY.add(&sk.scale(-0.5)).add(&sk2.scale(1.0 / 6.0));
    }
    let t2 = theta * theta;
    let a = (1.0 - theta.cos()) / t2;
    let b = (theta - theta.sin()) / (t2 * theta);
    Mat3::IDENTITY.add(&sk.scale(-a)).add(&sk2.scale(b))
}

// ---------------------------------------------------------------------------
// Camera / Ray

/// Pinhole camera. `pose` maps camera space to world space; camera space is
/// x-right, y-down, z-forward, matching image row order.
#[derive(Debug, Clone)]
pub struct Camera {
    pub rotation: Rotation,
    pub position: Vec3,
    pub focal: f64,
    pub principal: (f64, f64),
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        rotation: Rotation,
        position: Vec3,
        focal: f64,
        principal: (f64, f64),
        width: u32,
        height: u32,
    ) -> Result<Camera, GeomError> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(GeomError::BadCamera(format!("focal must be > 0, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(GeomError::BadCamera(format!(
                "resolution must be at least 1x1, got {width}x{height}"
            )));
        }
        if !position.is_finite() || !principal.0.is_finite() || !principal.1.is_finite() {
            return Err(GeomError::BadCamera("non-finite pose or principal point".into()));
        }
        Ok(Camera { rotation, position, focal, principal, width, height })
    }

    /// Camera placed at `eye` looking at `target`, with `up` as the
    /// approximate up direction in world space.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Camera, GeomError> {
        let forward = (target - eye).normalized();
        let right = forward.cross(up).normalized();
        let down = forward.cross(right).normalized();
        let m = Mat3::from_cols(right, down, forward);
        let rotation = Rotation::from_matrix(&m)?;
        Camera::new(
            rotation,
            eye,
            focal,
            (width as f64 * 0.5, height as f64 * 0.5),
            width,
            height,
        )
    }

    pub fn forward_axis(&self) -> Vec3 {
        self.rotation.rotate(Vec3::new(0.0, 0.0, 1.0))
    }
}

/// Ray with a unit direction and a marching interval [t_min, t_max].
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Ray through the center of pixel `px`, unit direction, bounds [near, far].
pub fn camera_ray(camera: &Camera, px: (i64, i64), near: f64, far: f64) -> Result<Ray, GeomError> {
    if px.0 < 0 || px.1 < 0 || px.0 >= camera.width as i64 || px.1 >= camera.height as i64 {
        return Err(GeomError::PixelOutOfBounds(px.0, px.1, camera.width, camera.height));
    }
    if !(near >= 0.0 && near < far && far.is_finite()) {
        return Err(GeomError::BadRayBounds(near, far));
    }
    let dir_cam = Vec3::new(
        (px.0 as f64 + 0.5 - camera.principal.0) / camera.focal,
        (px.1 as f64 + 0.5 - camera.principal.1) / camera.focal,
        1.0,
    );
    let direction = camera.rotation.rotate(dir_cam).normalized();
    Ok(Ray { origin: camera.position, direction, t_min: near, t_max: far })
}

/// Row-major serialized form of [`Camera`]: pose as a 4x4 camera-to-world
/// matrix plus intrinsics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub pose: [[f64; 4]; 4],
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> CameraRecord {
        let r = c.rotation.to_matrix();
        let mut pose = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                pose[i][j] = r.rows[i][j];
            }
        }
        pose[0][3] = c.position.x;
        pose[1][3] = c.position.y;
        pose[2][3] = c.position.z;
        pose[3][3] = 1.0;
        CameraRecord {
            pose,
            focal: c.focal,
            principal_point: [c.principal.0, c.principal.1],
            width: c.width,
            height: c.height,
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = GeomError;

    fn try_from(rec: &CameraRecord) -> Result<Camera, GeomError> {
        let p = &rec.pose;
        let m = Mat3::from_rows(
            [p[0][0], p[0][1], p[0][2]],
            [p[1][0], p[1][1], p[1][2]],
            [p[2][0], p[2][1], p[2][2]],
        );
        let rotation = Rotation::from_matrix(&m)?;
        let position = Vec3::new(p[0][3], p[1][3], p[2][3]);
        Camera::new(
            rotation,
            position,
            rec.focal,
            (rec.principal_point[0], rec.principal_point[1]),
            rec.width,
            rec.height,
        )
    }
}

// ---------------------------------------------------------------------------
// ImageBuffer

/// Interleaved float image. Color data lives in [0,1]; auxiliary channels
/// (coverage, gradients) are unbounded but must stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8) -> ImageBuffer {
        assert!(matches!(channels, 1 | 3 | 4), "channels must be 1, 3 or 4");
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![0.0; width as usize * height as usize * channels as usize],
        }
    }

    pub fn from_data(
        width: u32,
        height: u32,
        channels: u8,
        data: Vec<f64>,
    ) -> Result<ImageBuffer, GeomError> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(GeomError::BadChannelCount(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(GeomError::BadDataLength(data.len(), width, height, channels));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite(i));
        }
        Ok(ImageBuffer { width, height, channels, data })
    }

    pub fn pixel_index(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    pub fn get(&self, x: u32, y: u32, c: u8) -> f64 {
        self.data[self.pixel_index(x, y) + c as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, c: u8, v: f64) {
        let i = self.pixel_index(x, y) + c as usize;
        self.data[i] = v;
    }

    pub fn same_shape(&self, o: &ImageBuffer) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }

    pub fn max_abs_diff(&self, o: &ImageBuffer) -> f64 {
        self.data
            .iter()
            .zip(&o.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, o: &ImageBuffer) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).sum();
        s / self.data.len() as f64
    }
}

/// Peak signal-to-noise ratio in dB against a signal peak of 1.0.
/// Identical images return the +infinity sentinel (reported as >= 99 dB).
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, GeomError> {
    if !a.same_shape(b) {
        return Err(GeomError::ShapeMismatch(
            a.width, a.height, a.channels, b.width, b.height, b.channels,
        ));
    }
    let n = a.data.len();
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_rotation(rng: &mut ChaCha20Rng) -> Rotation {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        Rotation::from_axis_angle(v * rng.gen_range(0.0..3.0))
    }

    #[test]
    fn rotation_identity_compose() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let q = random_rotation(&mut rng);
        assert!(rotation_compose(&Rotation::IDENTITY, &q).approx_eq(&q, 1e-12));
        assert!(rotation_compose(&q, &q.inverse()).approx_eq(&Rotation::IDENTITY, 1e-12));
    }

    #[test]
    fn rotation_z90_twice_is_z180() {
        let z90 = Rotation::from_axis_angle(Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let z180 = rotation_compose(&z90, &z90);
        let v = z180.rotate(Vec3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(v.x, -1.0, epsilon = 1e-12);
        assert_relative_eq!(v.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(v.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn axis_angle_zero_is_identity() {
        let q = Rotation::from_axis_angle(Vec3::ZERO);
        assert!(q.approx_eq(&Rotation::IDENTITY, 1e-12));
    }

    #[test]
    fn axis_angle_quarter_turn() {
        let q = Rotation::from_axis_angle(Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let v = q.rotate(Vec3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(v.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(v.y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn axis_angle_log_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..200 {
            let v = Vec3::new(
                rng.gen_range(-0.57..0.57),
                rng.gen_range(-0.57..0.57),
                rng.gen_range(-0.57..0.57),
            );
            let back = Rotation::from_axis_angle(v).to_axis_angle();
            assert!((back - v).norm() < 1e-6, "roundtrip failed: {v:?} -> {back:?}");
        }
    }

    #[test]
    fn unit_norm_after_composition() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut q = Rotation::IDENTITY;
        for _ in 0..500 {
            q = rotation_compose(&q, &random_rotation(&mut rng));
            assert!((q.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matrix_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..100 {
            let q = random_rotation(&mut rng);
            let back = Rotation::from_matrix(&q.to_matrix()).unwrap();
            assert!(q.approx_eq(&back, 1e-9));
        }
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let h = 1e-6;
        for _ in 0..50 {
            let omega = Vec3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            let jr = so3_right_jacobian(omega);
            let base = Rotation::from_axis_angle(omega);
            for axis in 0..3 {
                let mut d = Vec3::ZERO;
                d.set_component(axis, h);
                let moved = Rotation::from_axis_angle(omega + d);
                // log(base^-1 * moved) / h should equal J_r e_axis
                let eps = rotation_compose(&base.inverse(), &moved).to_axis_angle() * (1.0 / h);
                let expect = jr.mul_vec(d * (1.0 / h));
                assert!((eps - expect).norm() < 1e-4, "omega={omega:?} axis={axis}");
            }
        }
    }

    #[test]
    fn center_pixel_ray_is_forward_axis() {
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, -3.0),
            Vec3::ZERO,
            Vec3::new(0.0, -1.0, 0.0),
            50.0,
            4,
            4,
        )
        .unwrap();
        // 4x4 image with principal point at (2,2): no single center pixel, so
        // build a camera whose principal point sits on a pixel center instead.
        let cam = Camera::new(cam.rotation, cam.position, 50.0, (1.5, 1.5), 4, 4).unwrap();
        let ray = camera_ray(&cam, (1, 1), 0.1, 10.0).unwrap();
        let fwd = cam.forward_axis();
        assert!((ray.direction - fwd).norm() < 1e-12);
    }

    #[test]
    fn focal_doubling_halves_small_angles() {
        // oracle: angle = atan(offset / focal) for pixel offsets on the axis;
        // principal y of 4.5 puts row 4 pixel centers exactly on the axis
        let mk = |focal: f64| {
            Camera::new(Rotation::IDENTITY, Vec3::ZERO, focal, (4.0, 4.5), 8, 8).unwrap()
        };
        let offset = 7.0 + 0.5 - 4.0;
        for focal in [60.0, 120.0] {
            let cam = mk(focal);
            let ray = camera_ray(&cam, (7, 4), 0.1, 10.0).unwrap();
            let angle = ray.direction.dot(cam.forward_axis()).min(1.0).acos();
            let expected = (offset / focal).atan();
            assert_relative_eq!(angle, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_error() {
        let cam = Camera::new(Rotation::IDENTITY, Vec3::ZERO, 10.0, (2.0, 2.0), 4, 4).unwrap();
        assert!(matches!(
            camera_ray(&cam, (-1, 0), 0.1, 10.0),
            Err(GeomError::PixelOutOfBounds(..))
        ));
        assert!(camera_ray(&cam, (4, 0), 0.1, 10.0).is_err());
    }

    #[test]
    fn camera_record_roundtrip() {
        let cam = Camera::look_at(
            Vec3::new(1.0, 2.0, -3.0),
            Vec3::ZERO,
            Vec3::new(0.0, -1.0, 0.0),
            80.0,
            32,
            24,
        )
        .unwrap();
        let rec = CameraRecord::from(&cam);
        let text = serde_json::to_string(&rec).unwrap();
        let parsed: CameraRecord = serde_json::from_str(&text).unwrap();
        let back = Camera::try_from(&parsed).unwrap();
        assert!(back.rotation.approx_eq(&cam.rotation, 1e-9));
        assert!((back.position - cam.position).norm() < 1e-12);
        assert_eq!(back.width, 32);
        assert_eq!(back.height, 24);
    }

    #[test]
    fn psnr_sentinel_and_known_values() {
        let a = ImageBuffer::from_data(2, 2, 1, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        assert!(psnr(&a, &a).unwrap() >= 99.0);

        let zero = ImageBuffer::from_data(2, 2, 1, vec![0.0; 4]).unwrap();
        let one = ImageBuffer::from_data(2, 2, 1, vec![1.0; 4]).unwrap();
        assert_relative_eq!(psnr(&zero, &one).unwrap(), 0.0, epsilon = 1e-12);

        let shifted = ImageBuffer::from_data(2, 2, 1, vec![0.1; 4]).unwrap();
        assert_relative_eq!(psnr(&zero, &shifted).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn psnr_shape_mismatch_is_error() {
        let a = ImageBuffer::new(2, 2, 1);
        let b = ImageBuffer::new(2, 3, 1);
        assert!(matches!(psnr(&a, &b), Err(GeomError::ShapeMismatch(..))));
    }

    #[test]
    fn image_from_data_validates() {
        assert!(ImageBuffer::from_data(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::from_data(2, 2, 1, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(ImageBuffer::from_data(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn rotation_composition_associative(seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let c = random_rotation(&mut rng);
            let ab_c = rotation_compose(&rotation_compose(&a, &b), &c);
            let a_bc = rotation_compose(&a, &rotation_compose(&b, &c));
            prop_assert!(ab_c.approx_eq(&a_bc, 1e-6));
        }

        #[test]
        fn rotation_preserves_norm(seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let q = random_rotation(&mut rng);
            let v = Vec3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            prop_assert!((q.rotate(v).norm() - v.norm()).abs() < 1e-6);
        }

        #[test]
        fn camera_rays_are_unit(px in 0i64..16, py in 0i64..16) {
            let cam = Camera::new(
                Rotation::from_axis_angle(Vec3::new(0.3, 0.2, 0.1)),
                Vec3::new(1.0, -2.0, 0.5),
                20.0,
                (8.0, 8.0),
                16,
                16,
            ).unwrap();
            let ray = camera_ray(&cam, (px, py), 0.01, 100.0).unwrap();
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn psnr_symmetric_nonnegative(seed in 0u64..200) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let data_a: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
            let data_b: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
            let a = ImageBuffer::from_data(2, 2, 3, data_a).unwrap();
            let b = ImageBuffer::from_data(2, 2, 3, data_b).unwrap();
            let ab = psnr(&a, &b).unwrap();
            let ba = psnr(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab >= 0.0);
        }
    }
}
