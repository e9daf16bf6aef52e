//! Motion-blur synthesis: the blurry image is the mean of sharp renders at
//! evenly spaced instants `u_i = i / (n - 1)` of the exposure trajectory.

use nalgebra::{Vector3, Vector6};
use thiserror::Error;

use crate::image::ImageBuffer;
use crate::lie::{LieError, Pose, TrajectorySpline, Twist};
use crate::projection::Intrinsics;
use crate::rasterizer::{render_backward, render_forward, GradientBundle, RenderAux, RenderError};
use crate::scene::GaussianScene;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BlurError {
    #[error("n_virtual must be at least 2, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurConfig {
    pub n_virtual: usize,
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig { n_virtual: 10 }
    }
}

impl BlurConfig {
    pub fn new(n_virtual: usize) -> Result<Self, BlurError> {
        let cfg = BlurConfig { n_virtual };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BlurError> {
        if self.n_virtual < 2 {
            return Err(BlurError::TooFewSamples(self.n_virtual));
        }
        Ok(())
    }

    /// Exposure instants including both endpoints.
    pub fn sample_times(&self) -> Vec<f64> {
        let last = (self.n_virtual - 1) as f64;
        (0..self.n_virtual).map(|i| i as f64 / last).collect()
    }
}

/// One virtual sharp render of a blur synthesis.
#[derive(Debug, Clone)]
pub struct BlurSample {
    pub u: f64,
    pub pose: Pose,
    pub aux: RenderAux,
}

/// Renders `n_virtual` sharp images along `traj` and averages them.
pub fn synthesize_blur(
    scene: &GaussianScene,
    traj: &TrajectorySpline,
    k: &Intrinsics,
    cfg: &BlurConfig,
    background: &Vector3<f64>,
) -> Result<(ImageBuffer, Vec<BlurSample>), BlurError> {
    cfg.validate()?;
    let weight = 1.0 / cfg.n_virtual as f64;
    let mut out = ImageBuffer::new(k.width, k.height);
    let mut samples = Vec::with_capacity(cfg.n_virtual);
    for u in cfg.sample_times() {
        let pose = traj.pose_at(u)?;
        let (img, aux) = render_forward(scene, &pose, k, background);
        out.add_scaled(&img, weight);
        samples.push(BlurSample { u, pose, aux });
    }
    Ok((out, samples))
}

/// Reverse pass of [`synthesize_blur`].
///
/// Returns the scene gradient summed over samples (its `d_pose` is the sum
/// of the per-sample pose gradients) and one twist gradient per knot.
pub fn blur_backward(
    samples: &[BlurSample],
    dl_dblur: &ImageBuffer,
    scene: &GaussianScene,
    traj: &TrajectorySpline,
    k: &Intrinsics,
) -> Result<(GradientBundle, Vec<Twist>), BlurError> {
    if samples.is_empty() {
        return Err(RenderError::AuxMismatch("no blur samples".into()).into());
    }
    let mut per_sample = dl_dblur.clone();
    per_sample.scale(1.0 / samples.len() as f64);
    let mut total = GradientBundle::zeros(scene.len());
    let mut pose_sum = Vector6::zeros();
    let mut knots = vec![Vector6::zeros(); traj.knots().len()];
    for s in samples {
        let g = render_backward(scene, &s.pose, k, &s.aux, &per_sample)?;
        total.accumulate_scene(&g);
        pose_sum += g.d_pose.0;
        let jac = traj.pose_jacobian_wrt_knots(s.u)?;
        for (acc, block) in knots.iter_mut().zip(&jac.blocks) {
            *acc += block.transpose() * g.d_pose.0;
        }
    }
    total.d_pose = Twist(pose_sum);
    Ok((total, knots.into_iter().map(Twist).collect()))
}
