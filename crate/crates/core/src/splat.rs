//! Gaussian and camera value types, spherical-harmonic color, and EWA
//! projection of 3D Gaussians onto the image plane.
//!
//! The cloud keeps its parameters in their stored ("raw") form: log scales,
//! opacity logits and unnormalized `wxyz` quaternions, exactly as they appear
//! in a 3DGS PLY file. Activated values are computed on access, so a
//! load/save pair is bit-exact and editing a cloud is plain row selection.

use glam::{DMat3, DQuat, DVec2, DVec3};

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of SH coefficients per channel for a degree.
pub fn sh_coeff_count(degree: u8) -> usize {
    let d = degree as usize + 1;
    d * d
}

/// One Gaussian in activated form, used to build clouds programmatically.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    /// Standard deviations along the local axes, world units.
    pub scale: [f64; 3],
    /// `wxyz`, need not be normalized.
    pub rotation: [f64; 4],
    /// In (0, 1).
    pub opacity: f64,
    /// `K` RGB coefficient triples, `K` matching the cloud's degree.
    pub sh: Vec<[f64; 3]>,
}

impl Gaussian {
    /// An isotropic Gaussian whose degree-0 color evaluates to `rgb`.
    pub fn isotropic(position: [f64; 3], sigma: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        Gaussian {
            position,
            scale: [sigma; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity,
            sh: vec![rgb.map(rgb_to_dc)],
        }
    }
}

/// Degree-0 coefficient that evaluates to `c` (before clamping).
pub fn rgb_to_dc(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A set of Gaussians stored column-wise in raw (file) parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    sh_degree: u8,
    pub(crate) positions: Vec<[f32; 3]>,
    /// `N × K × 3`, coefficient-major per Gaussian.
    pub(crate) sh: Vec<f32>,
    pub(crate) raw_opacity: Vec<f32>,
    pub(crate) raw_scale: Vec<[f32; 3]>,
    pub(crate) raw_rotation: Vec<[f32; 4]>,
}

impl GaussianCloud {
    pub fn new(sh_degree: u8) -> Self {
        assert!(sh_degree <= 3, "SH degree above 3 is not supported");
        GaussianCloud {
            sh_degree,
            positions: Vec::new(),
            sh: Vec::new(),
            raw_opacity: Vec::new(),
            raw_scale: Vec::new(),
            raw_rotation: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_degree(&self) -> u8 {
        self.sh_degree
    }

    pub fn sh_coeffs_per_channel(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    /// Appends a Gaussian given in activated form. Missing higher-order SH
    /// coefficients are zero.
    pub fn push(&mut self, g: &Gaussian) {
        assert!(g.opacity > 0.0 && g.opacity < 1.0, "opacity must be in (0,1)");
        assert!(g.scale.iter().all(|&s| s > 0.0), "scales must be positive");
        self.positions.push(g.position.map(|v| v as f32));
        self.raw_opacity.push(logit(g.opacity) as f32);
        self.raw_scale.push(g.scale.map(|s| s.ln() as f32));
        self.raw_rotation.push(g.rotation.map(|v| v as f32));
        let k = self.sh_coeffs_per_channel();
        for i in 0..k {
            let c = g.sh.get(i).copied().unwrap_or([0.0; 3]);
            self.sh.extend(c.iter().map(|&v| v as f32));
        }
    }

    /// Appends a Gaussian in raw form; `sh` must hold `K × 3` values.
    pub fn push_raw(
        &mut self,
        position: [f32; 3],
        sh: &[f32],
        raw_opacity: f32,
        raw_scale: [f32; 3],
        raw_rotation: [f32; 4],
    ) {
        assert_eq!(sh.len(), 3 * self.sh_coeffs_per_channel());
        self.positions.push(position);
        self.sh.extend_from_slice(sh);
        self.raw_opacity.push(raw_opacity);
        self.raw_scale.push(raw_scale);
        self.raw_rotation.push(raw_rotation);
    }

    pub fn position(&self, k: usize) -> DVec3 {
        let p = self.positions[k];
        DVec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn opacity(&self, k: usize) -> f64 {
        sigmoid(self.raw_opacity[k] as f64)
    }

    pub fn scale(&self, k: usize) -> DVec3 {
        let s = self.raw_scale[k];
        DVec3::new(
            (s[0] as f64).exp(),
            (s[1] as f64).exp(),
            (s[2] as f64).exp(),
        )
    }

    /// Unit rotation. A degenerate stored quaternion maps to identity.
    pub fn rotation(&self, k: usize) -> DQuat {
        let [w, x, y, z] = self.raw_rotation[k].map(|v| v as f64);
        let q = DQuat::from_xyzw(x, y, z, w);
        let n = q.length();
        if n > 0.0 && n.is_finite() {
            q / n
        } else {
            DQuat::IDENTITY
        }
    }

    /// SH coefficients of Gaussian `k` as `K × 3` floats.
    pub fn sh(&self, k: usize) -> &[f32] {
        let stride = 3 * self.sh_coeffs_per_channel();
        &self.sh[k * stride..(k + 1) * stride]
    }

    pub fn sh_mut(&mut self, k: usize) -> &mut [f32] {
        let stride = 3 * self.sh_coeffs_per_channel();
        &mut self.sh[k * stride..(k + 1) * stride]
    }

    pub fn raw_opacity(&self, k: usize) -> f32 {
        self.raw_opacity[k]
    }

    pub fn raw_scale(&self, k: usize) -> [f32; 3] {
        self.raw_scale[k]
    }

    pub fn raw_rotation(&self, k: usize) -> [f32; 4] {
        self.raw_rotation[k]
    }

    pub fn raw_position(&self, k: usize) -> [f32; 3] {
        self.positions[k]
    }

    /// World-space covariance `R diag(s²) Rᵀ`.
    pub fn covariance(&self, k: usize) -> DMat3 {
        let r = DMat3::from_quat(self.rotation(k));
        let s = self.scale(k);
        let rs = DMat3::from_cols(r.x_axis * s.x, r.y_axis * s.y, r.z_axis * s.z);
        rs * rs.transpose()
    }

    /// New cloud holding the listed Gaussians in the given order.
    pub fn select(&self, indices: &[usize]) -> GaussianCloud {
        let stride = 3 * self.sh_coeffs_per_channel();
        let mut out = GaussianCloud::new(self.sh_degree);
        out.positions = indices.iter().map(|&k| self.positions[k]).collect();
        out.raw_opacity = indices.iter().map(|&k| self.raw_opacity[k]).collect();
        out.raw_scale = indices.iter().map(|&k| self.raw_scale[k]).collect();
        out.raw_rotation = indices.iter().map(|&k| self.raw_rotation[k]).collect();
        out.sh = Vec::with_capacity(indices.len() * stride);
        for &k in indices {
            out.sh.extend_from_slice(self.sh(k));
        }
        out
    }

    /// Checks that every stored value is finite and every quaternion usable.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let stride = 3 * self.sh_coeffs_per_channel();
        if self.raw_opacity.len() != n
            || self.raw_scale.len() != n
            || self.raw_rotation.len() != n
            || self.sh.len() != n * stride
        {
            return Err(Error::Dimension("cloud column lengths disagree".into()));
        }
        for k in 0..n {
            let finite = self.positions[k].iter().all(|v| v.is_finite())
                && self.raw_opacity[k].is_finite()
                && self.raw_scale[k].iter().all(|v| v.is_finite())
                && self.raw_rotation[k].iter().all(|v| v.is_finite())
                && self.sh(k).iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::parse("gaussian cloud", format!("non-finite value in Gaussian {k}")));
            }
            if self.raw_rotation[k].iter().all(|&v| v == 0.0) {
                return Err(Error::parse("gaussian cloud", format!("zero quaternion in Gaussian {k}")));
            }
        }
        Ok(())
    }
}

/// Pinhole camera with a world-to-camera rigid pose `x_cam = R·x_world + t`.
/// Camera space looks down `+z`, `+x` right, `+y` down in the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub view: usize,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: DMat3,
    pub translation: DVec3,
}

impl Camera {
    /// Validates intrinsics and rigidity of the rotation.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        view: usize,
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: DMat3,
        translation: DVec3,
    ) -> Result<Self> {
        let cam = Camera {
            view,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.view;
        if self.width < 1 || self.height < 1 {
            return Err(Error::Camera(format!("view {v}: image size must be at least 1x1")));
        }
        let intr = [self.fx, self.fy, self.cx, self.cy];
        if !intr.iter().all(|x| x.is_finite()) || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Camera(format!("view {v}: focal lengths must be positive and finite")));
        }
        if !self.translation.is_finite() || !self.rotation.is_finite() {
            return Err(Error::Camera(format!("view {v}: non-finite pose")));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        if !rtr.abs_diff_eq(DMat3::IDENTITY, 1e-5) {
            return Err(Error::Camera(format!("view {v}: rotation is not orthonormal")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-5 {
            return Err(Error::Camera(format!(
                "view {v}: rotation is not rigid (determinant {det:.6})"
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> DVec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: DVec3) -> DVec3 {
        self.rotation * p + self.translation
    }

    /// Same pose with intrinsics rescaled to a `width × height` image.
    pub fn rescaled(&self, width: u32, height: u32) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            width,
            height,
            fx: self.fx * sx,
            cx: self.cx * sx,
            fy: self.fy * sy,
            cy: self.cy * sy,
            ..*self
        }
    }

    /// Camera at `eye` looking at `target`, image `+y` aligned with `-up`.
    pub fn look_at(
        view: usize,
        width: u32,
        height: u32,
        focal: f64,
        eye: DVec3,
        target: DVec3,
        up: DVec3,
    ) -> Camera {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(x);
        // rows are the camera axes in world coordinates
        let rotation = DMat3::from_cols(x, y, z).transpose();
        Camera {
            view,
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: -(rotation * eye),
        }
    }
}

/// Evaluates the view-dependent color of Gaussian `k` seen along `dir`
/// (unit vector from the camera toward the Gaussian).
pub fn evaluate_sh(cloud: &GaussianCloud, k: usize, dir: DVec3) -> [f64; 3] {
    let sh = cloud.sh(k);
    let coeff = |i: usize, c: usize| sh[3 * i + c] as f64;
    let degree = cloud.sh_degree();
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut basis = [0.0f64; 16];
    basis[0] = SH_C0;
    if degree > 0 {
        basis[1] = -SH_C1 * y;
        basis[2] = SH_C1 * z;
        basis[3] = -SH_C1 * x;
    }
    if degree > 1 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        basis[4] = SH_C2[0] * x * y;
        basis[5] = SH_C2[1] * y * z;
        basis[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        basis[7] = SH_C2[3] * x * z;
        basis[8] = SH_C2[4] * (xx - yy);
        if degree > 2 {
            basis[9] = SH_C3[0] * y * (3.0 * xx - yy);
            basis[10] = SH_C3[1] * x * y * z;
            basis[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            basis[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            basis[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            basis[14] = SH_C3[5] * z * (xx - yy);
            basis[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    let k_count = cloud.sh_coeffs_per_channel();
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let v: f64 = (0..k_count).map(|i| basis[i] * coeff(i, c)).sum();
        *out = (v + 0.5).clamp(0.0, 1.0);
    }
    rgb
}

/// Inclusive pixel rectangle, already clipped to the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// A Gaussian after projection into one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub index: u32,
    /// Pixel coordinates; pixel `(x, y)` has its center at `(x+0.5, y+0.5)`.
    pub mean: DVec2,
    /// Symmetric 2D covariance `[xx, xy, yy]`, px².
    pub cov: [f64; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub rgb: [f64; 3],
    /// Three standard deviations along the major axis, px.
    pub radius: f64,
    /// Pixels whose centers lie inside the 3σ box around `mean`.
    pub rect: PixelRect,
}

impl ProjectedGaussian {
    /// Unclamped Gaussian falloff times base opacity at a pixel center, or
    /// `None` when the pixel is outside the footprint.
    #[inline]
    pub fn falloff_alpha(&self, x: u32, y: u32) -> Option<f64> {
        if !self.rect.contains(x, y) {
            return None;
        }
        let dx = x as f64 + 0.5 - self.mean.x;
        let dy = y as f64 + 0.5 - self.mean.y;
        let power =
            -0.5 * (self.conic[0] * dx * dx + self.conic[2] * dy * dy) - self.conic[1] * dx * dy;
        if power > 0.0 {
            return None;
        }
        Some(self.opacity * power.exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionParams {
    /// Camera-space depth below which Gaussians are culled, meters.
    pub near: f64,
    /// Isotropic dilation added to the 2D covariance, px².
    pub lowpass: f64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams {
            near: 0.01,
            lowpass: 0.3,
        }
    }
}

/// Projects Gaussian `k` into `camera`. `None` means culled: behind the near
/// plane, degenerate, or with a footprint that misses the image.
pub fn project_gaussian(
    cloud: &GaussianCloud,
    k: usize,
    camera: &Camera,
    params: &ProjectionParams,
) -> Option<ProjectedGaussian> {
    let world = cloud.position(k);
    let p = camera.world_to_camera(world);
    if p.z <= params.near || !p.is_finite() {
        return None;
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let mean = DVec2::new(fx * p.x / p.z + camera.cx, fy * p.y / p.z + camera.cy);

    let cov_cam = camera.rotation * cloud.covariance(k) * camera.rotation.transpose();
    let inv_z = 1.0 / p.z;
    let j0 = DVec3::new(fx * inv_z, 0.0, -fx * p.x * inv_z * inv_z);
    let j1 = DVec3::new(0.0, fy * inv_z, -fy * p.y * inv_z * inv_z);
    let a = j0.dot(cov_cam * j0) + params.lowpass;
    let b = j0.dot(cov_cam * j1);
    let c = j1.dot(cov_cam * j1) + params.lowpass;

    let det = a * c - b * b;
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let half_diff = 0.5 * (a - c);
    let lambda_max = 0.5 * (a + c) + (half_diff * half_diff + b * b).sqrt();
    let radius = 3.0 * lambda_max.sqrt();

    let (w, h) = (camera.width as f64, camera.height as f64);
    let x_lo = (mean.x - radius - 0.5).ceil().max(0.0);
    let x_hi = (mean.x + radius - 0.5).floor().min(w - 1.0);
    let y_lo = (mean.y - radius - 0.5).ceil().max(0.0);
    let y_hi = (mean.y + radius - 0.5).floor().min(h - 1.0);
    if !(x_lo <= x_hi && y_lo <= y_hi) {
        return None;
    }
    let rect = PixelRect {
        x0: x_lo as u32,
        y0: y_lo as u32,
        x1: x_hi as u32,
        y1: y_hi as u32,
    };

    let dir = (world - camera.center()).normalize_or_zero();
    Some(ProjectedGaussian {
        index: k as u32,
        mean,
        cov: [a, b, c],
        conic,
        depth: p.z,
        opacity: cloud.opacity(k),
        rgb: evaluate_sh(cloud, k, dir),
        radius,
        rect,
    })
}
