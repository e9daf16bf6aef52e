#![allow(dead_code)]

pub mod fd;
pub mod oracle;

use blursplat::image::ImageBuffer;
use blursplat::lie::{Pose, Rotation};
use blursplat::projection::Intrinsics;
use blursplat::scene::{Gaussian, GaussianScene};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussians spread in front of an identity camera looking down +z.
pub fn scene_in_view(n: usize, seed: u64) -> GaussianScene {
    let mut r = rng(seed);
    let mut s = GaussianScene::new();
    for _ in 0..n {
        let z = r.random_range(2.0..3.5);
        let x = r.random_range(-0.35..0.35) * z;
        let y = r.random_range(-0.35..0.35) * z;
        let q = Rotation::from_wxyz(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        );
        s.push(&Gaussian {
            position: Vector3::new(x, y, z),
            log_scale: Vector3::from_fn(|_, _| r.random_range(0.08f64..0.3).ln()),
            rotation: q,
            opacity: r.random_range(0.3..0.9),
            color: Vector3::from_fn(|_, _| r.random_range(0.05..0.95)),
        });
    }
    s
}

pub fn camera16() -> Intrinsics {
    Intrinsics::new(18.0, 18.0, 8.0, 8.0, 16, 16)
}

pub fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut r = rng(seed);
    let data = (0..w * h * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    ImageBuffer::from_vec(w, h, data).unwrap()
}

pub fn dot(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn small_pose(seed: u64) -> Pose {
    let mut r = rng(seed);
    let xi = blursplat::lie::Twist::from_slice(&(0..6).map(|_| r.random_range(-0.05..0.05)).collect::<Vec<_>>());
    blursplat::lie::se3_exp(&xi)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// 20 Gaussians, 16x16, linear blur with `n_virtual` samples.
pub fn blur_problem(seed: u64, n_virtual: usize) -> fd::BlurProblem {
    let start = small_pose(seed ^ 0x5eed);
    let end = start.perturbed(&blursplat::lie::Twist::from_slice(&[0.04, -0.03, 0.02, 0.015, -0.02, 0.01]));
    fd::BlurProblem {
        scene: scene_in_view(20, seed),
        traj: blursplat::lie::TrajectorySpline::linear(start, end),
        k: camera16(),
        n_virtual,
        background: Vector3::new(0.1, 0.2, 0.3),
        weights: random_image(16, 16, seed + 1000),
    }
}

/// Fixed-seed proptest configuration so every run draws the same cases.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed_b1a5),
        failure_persistence: None,
        ..Default::default()
    }
}
