//! Procedural ground truth: random Gaussian scenes and motion-blurred
//! multi-view datasets with known trajectories.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use thiserror::Error;

use crate::blur::{synthesize_blur, BlurConfig, BlurError};
use crate::image::ImageBuffer;
use crate::lie::{Pose, Rotation, TrajectoryKind, TrajectorySpline, Twist};
use crate::optim::TrainView;
use crate::projection::Intrinsics;
use crate::rasterizer::render_forward;
use crate::scene::{Gaussian, GaussianScene};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("cannot generate a dataset from an empty scene")]
    EmptyScene,
    #[error(transparent)]
    Blur(#[from] BlurError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub gaussian_count: usize,
    /// Side of the cube holding the Gaussian centers, centered at the origin.
    pub scene_extent: f64,
    pub image_count: usize,
    pub width: usize,
    pub height: usize,
    pub fov_x_deg: f64,
    /// Camera orbit radius as a multiple of the extent.
    pub orbit_radius: f64,
    /// Rotation swept during one exposure, degrees.
    pub blur_rot_deg: f64,
    /// Camera-center travel during one exposure, fraction of the extent.
    pub blur_trans_frac: f64,
    /// Cubic trajectories only: the knot step grows by this factor per knot.
    pub acceleration: f64,
    pub n_oracle: usize,
    /// Training sample count the oracle must out-resolve.
    pub n_virtual: usize,
    pub kind: TrajectoryKind,
    /// Initial-trajectory perturbation per knot, degrees.
    pub init_rot_deg: f64,
    /// Initial-trajectory perturbation per knot, fraction of the extent.
    pub init_trans_frac: f64,
    pub point_fraction: f64,
    /// Point-cloud noise standard deviation, fraction of the extent.
    pub point_noise_frac: f64,
    pub background: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            gaussian_count: 300,
            scene_extent: 1.0,
            image_count: 12,
            width: 64,
            height: 64,
            fov_x_deg: 95.0,
            orbit_radius: 1.0,
            blur_rot_deg: 6.0,
            blur_trans_frac: 0.005,
            acceleration: 0.0,
            n_oracle: 51,
            n_virtual: 10,
            kind: TrajectoryKind::Linear,
            init_rot_deg: 0.5,
            init_trans_frac: 0.01,
            point_fraction: 0.3,
            point_noise_frac: 0.005,
            background: [0.0; 3],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_oracle % 2 == 0 {
            return bad("n_oracle must be odd");
        }
        if self.n_oracle < 5 * self.n_virtual {
            return bad("n_oracle must be at least 5 x n_virtual");
        }
        if !(self.scene_extent > 0.0) || self.image_count == 0 || self.width == 0 || self.height == 0 {
            return bad("extent, image count and size must be positive");
        }
        if !(self.fov_x_deg > 0.0 && self.fov_x_deg < 180.0) || !(self.orbit_radius > 0.0) {
            return bad("fov must be in (0, 180) and orbit radius positive");
        }
        if !(0.0..=1.0).contains(&self.point_fraction) {
            return bad("point fraction must be in [0, 1]");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.fov_x_deg.to_radians())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from(UnitSphere.sample(rng))
}

/// Seeded random Gaussians with centers uniform in the extent cube.
pub fn generate_scene(spec: &SynthSpec) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.scene_extent;
    let mut scene = GaussianScene::new();
    for _ in 0..spec.gaussian_count {
        let position = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5) * e);
        let log_scale = Vector3::from_fn(|_, _| (rng.random_range(0.005..0.03) * e).ln());
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        scene.push(&Gaussian {
            position,
            log_scale,
            rotation: Rotation::from_wxyz(q[0], q[1], q[2], q[3]),
            opacity: rng.random_range(0.3..0.95),
            color: Vector3::from_fn(|_, _| rng.random_range(0.05..0.95)),
        });
    }
    scene
}

/// World-to-camera pose at `center` looking at the origin, world z up.
pub fn look_at(center: &Vector3<f64>) -> Pose {
    let forward = (-center).normalize();
    let up = if forward.z.abs() > 0.99 { Vector3::y() } else { Vector3::z() };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let rotation = Rotation::from_matrix(&r);
    Pose::new(rotation, -(rotation.matrix() * center))
}

/// Mid-exposure camera poses on a seeded orbit around the origin.
pub fn orbit_poses(spec: &SynthSpec) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0b17);
    let radius = spec.orbit_radius * spec.scene_extent;
    (0..spec.image_count)
        .map(|i| {
            let azimuth = 2.0 * PI * (i as f64 + rng.random_range(-0.2..0.2)) / spec.image_count as f64;
            let elevation = (if i % 2 == 0 { 15.0f64 } else { 30.0 } + rng.random_range(-5.0..5.0)).to_radians();
            let c = Vector3::new(
                azimuth.cos() * elevation.cos(),
                azimuth.sin() * elevation.cos(),
                elevation.sin(),
            ) * radius;
            look_at(&c)
        })
        .collect()
}

/// Exposure trajectory around `mid`: rotation and translation are swept in
/// the camera frame along seeded random directions.
fn exposure_trajectory(spec: &SynthSpec, mid: &Pose, rng: &mut ChaCha8Rng) -> TrajectorySpline {
    let rho = unit_vector(rng) * spec.blur_trans_frac * spec.scene_extent;
    let phi = unit_vector(rng) * spec.blur_rot_deg.to_radians();
    let step = Twist::new(rho, phi);
    match spec.kind {
        TrajectoryKind::Linear => TrajectorySpline::linear(mid.perturbed(&step.scaled(-0.5)), mid.perturbed(&step.scaled(0.5))),
        TrajectoryKind::CubicBSpline => {
            // Knot offsets along the sweep: unit steps, each `1 + a` times the last.
            let a = 1.0 + spec.acceleration;
            let steps = [1.0, a, a * a];
            let mut offsets = [0.0; 4];
            for j in 0..3 {
                offsets[j + 1] = offsets[j] + steps[j];
            }
            // Normalize so the middle segment spans one sweep, centered.
            let scale = 1.0 / steps[1];
            let center = 0.5 * (offsets[1] + offsets[2]);
            let knots = offsets.map(|o| mid.perturbed(&step.scaled((o - center) * scale)));
            TrajectorySpline::cubic(knots)
        }
    }
}

/// Perturbs every knot by exactly `rot_deg` and a center shift of `trans` along
/// seeded random directions.
pub fn perturb_trajectory(traj: &TrajectorySpline, rot_deg: f64, trans: f64, rng: &mut ChaCha8Rng) -> TrajectorySpline {
    let knots = traj
        .knots()
        .iter()
        .map(|k| {
            let phi = unit_vector(rng) * rot_deg.to_radians();
            let rho = unit_vector(rng) * trans;
            // Rotate about the camera center, then move the center by `trans`.
            k.perturbed(&Twist::new(Vector3::zeros(), phi)).perturbed(&Twist::new(rho, Vector3::zeros()))
        })
        .collect();
    TrajectorySpline::new(traj.kind(), knots).expect("knot count preserved")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub intrinsics: Intrinsics,
    /// Blurry training images, ids starting at 1.
    pub views: Vec<TrainView>,
    pub gt_trajectories: Vec<TrajectorySpline>,
    /// Mid-exposure sharp renders.
    pub sharp: Vec<ImageBuffer>,
    pub init_trajectories: Vec<TrajectorySpline>,
    pub points: Vec<Vector3<f64>>,
    pub point_colors: Vec<Vector3<f64>>,
    pub background: [f64; 3],
    pub scene_extent: f64,
}

impl SynthDataset {
    pub fn ids(&self) -> Vec<u32> {
        self.views.iter().map(|v| v.id).collect()
    }
}

pub fn generate_dataset(scene: &GaussianScene, spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    if scene.is_empty() {
        return Err(SynthError::EmptyScene);
    }
    let k = spec.intrinsics();
    let bg = Vector3::from(spec.background);
    let oracle = BlurConfig::new(spec.n_oracle)?;
    let mut traj_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7a11);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0015e);
    let mut views = Vec::new();
    let mut gt = Vec::new();
    let mut sharp = Vec::new();
    let mut init = Vec::new();
    for (i, mid) in orbit_poses(spec).iter().enumerate() {
        let traj = exposure_trajectory(spec, mid, &mut traj_rng);
        let (blurry, _) = synthesize_blur(scene, &traj, &k, &oracle, &bg)?;
        let (reference, _) = render_forward(scene, &traj.pose_at(0.5).map_err(BlurError::from)?, &k, &bg);
        init.push(perturb_trajectory(
            &traj,
            spec.init_rot_deg,
            spec.init_trans_frac * spec.scene_extent,
            &mut noise_rng,
        ));
        views.push(TrainView {
            id: i as u32 + 1,
            image: blurry,
            intrinsics: k,
        });
        gt.push(traj);
        sharp.push(reference);
    }

    let mut cloud_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc10d);
    let keep = ((spec.point_fraction * scene.len() as f64).round() as usize).clamp(1, scene.len());
    let mut idx = rand::seq::index::sample(&mut cloud_rng, scene.len(), keep).into_vec();
    idx.sort_unstable();
    let sigma = spec.point_noise_frac * spec.scene_extent;
    let points = idx
        .iter()
        .map(|&i| {
            let noise = Vector3::from_fn(|_, _| {
                let z: f64 = StandardNormal.sample(&mut cloud_rng);
                sigma * z
            });
            scene.position(i) + noise
        })
        .collect();
    let point_colors = idx.iter().map(|&i| scene.color(i)).collect();

    Ok(SynthDataset {
        intrinsics: k,
        views,
        gt_trajectories: gt,
        sharp,
        init_trajectories: init,
        points,
        point_colors,
        background: spec.background,
        scene_extent: spec.scene_extent,
    })
}
