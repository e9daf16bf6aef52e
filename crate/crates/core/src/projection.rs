//! Pinhole projection of 3D Gaussians to screen-space 2D Gaussians.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::lie::Pose;
use crate::scene::GaussianScene;

/// Points at or closer than this camera depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Screen-space low-pass added to the projected covariance diagonal.
pub const DILATION: f64 = 0.3;
/// Centers farther than this multiple of the half image extent from the
/// image center are culled.
pub const GUARD_BAND: f64 = 1.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProjectionError {
    #[error("camera-space depth {0} must be positive")]
    NonPositiveDepth(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Centered principal point with a horizontal field of view in radians.
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.width >= 1 && self.height >= 1
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Whether a camera-space point lies in front of the camera and inside
    /// the image (no guard band).
    pub fn sees(&self, p: &Vector3<f64>) -> bool {
        if p.z <= NEAR_PLANE {
            return false;
        }
        let m = self.project(p);
        m.x >= 0.0 && m.y >= 0.0 && m.x <= self.width as f64 && m.y <= self.height as f64
    }
}

/// `d(pixel) / d(camera point)` of the pinhole map.
pub fn projection_jacobian(mu_c: &Vector3<f64>, k: &Intrinsics) -> Result<Matrix2x3<f64>, ProjectionError> {
    if mu_c.z <= 0.0 {
        return Err(ProjectionError::NonPositiveDepth(mu_c.z));
    }
    Ok(jacobian_unchecked(mu_c, k))
}

fn jacobian_unchecked(mu_c: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let inv_z = 1.0 / mu_c.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * mu_c.x * inv_z2,
        0.0,
        k.fy * inv_z,
        -k.fy * mu_c.y * inv_z2,
    )
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// Dilated 2D covariance.
    pub cov2d: Matrix2<f64>,
    /// Camera-space mean; `depth` is its z.
    pub mean_cam: Vector3<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub source_index: usize,
}

impl ProjectedGaussian {
    /// Inverse covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    pub fn conic(&self) -> (f64, f64, f64) {
        let (a, b, c) = (self.cov2d[(0, 0)], self.cov2d[(0, 1)], self.cov2d[(1, 1)]);
        let inv_det = 1.0 / (a * c - b * b);
        (c * inv_det, -b * inv_det, a * inv_det)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let (a, b, c) = (self.cov2d[(0, 0)], self.cov2d[(0, 1)], self.cov2d[(1, 1)]);
        let mid = 0.5 * (a + c);
        mid + (0.25 * (a - c) * (a - c) + b * b).sqrt()
    }
}

/// `J R_c Sigma R_c^T J^T` without dilation.
pub fn project_covariance(cov: &Matrix3<f64>, rot: &Matrix3<f64>, jac: &Matrix2x3<f64>) -> Matrix2<f64> {
    let m = jac * rot;
    let mut out = m * cov * m.transpose();
    let off = 0.5 * (out[(0, 1)] + out[(1, 0)]);
    out[(0, 1)] = off;
    out[(1, 0)] = off;
    out
}

/// Projects Gaussian `index` through a world-to-camera `pose`.
///
/// Returns `None` (culled) for centers behind the near plane or outside the
/// guard band.
pub fn project_gaussian(
    scene: &GaussianScene,
    index: usize,
    pose: &Pose,
    k: &Intrinsics,
) -> Option<ProjectedGaussian> {
    let rot = pose.rotation_matrix();
    project_with_rotation(scene, index, pose, &rot, k)
}

pub(crate) fn project_with_rotation(
    scene: &GaussianScene,
    index: usize,
    pose: &Pose,
    rot: &Matrix3<f64>,
    k: &Intrinsics,
) -> Option<ProjectedGaussian> {
    let mu_c = rot * scene.position(index) + pose.translation;
    if mu_c.z <= NEAR_PLANE {
        return None;
    }
    let mean2d = k.project(&mu_c);
    let half_w = 0.5 * k.width as f64;
    let half_h = 0.5 * k.height as f64;
    if (mean2d.x - half_w).abs() > GUARD_BAND * half_w || (mean2d.y - half_h).abs() > GUARD_BAND * half_h {
        return None;
    }
    let jac = jacobian_unchecked(&mu_c, k);
    let cov2d = project_covariance(&scene.covariance(index).0, rot, &jac) + Matrix2::identity() * DILATION;
    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        mean_cam: mu_c,
        depth: mu_c.z,
        color: scene.color(index),
        opacity: scene.opacity(index),
        source_index: index,
    })
}

/// Projects every Gaussian, dropping culled ones. Order follows the scene.
pub fn project_scene(scene: &GaussianScene, pose: &Pose, k: &Intrinsics) -> Vec<ProjectedGaussian> {
    let rot = pose.rotation_matrix();
    (0..scene.len())
        .filter_map(|i| project_with_rotation(scene, i, pose, &rot, k))
        .collect()
}
