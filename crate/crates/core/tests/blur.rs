mod common;

use blursplat::blur::{blur_backward, synthesize_blur, BlurConfig};
use blursplat::image::ImageBuffer;
use blursplat::lie::{se3_exp, TrajectorySpline, Twist};
use blursplat::rasterizer::render_forward;
use common::*;
use nalgebra::Vector3;
use proptest::prelude::*;

// Seed whose finite-difference brackets all keep the contribution structure.
const FD_SEED: u64 = 33;

#[test]
fn blur_gradients_match_finite_differences() {
    let report = blur_problem(FD_SEED, 4).check();
    assert!(report.unstable.is_empty(), "structure changes inside brackets: {:?}", report.unstable);
    assert!(report.mismatches.is_empty(), "{:#?}", report.mismatches);
    assert_eq!(report.checked, 20 * 14 + 12);
}

#[test]
fn moving_camera_equals_mean_of_separate_renders() {
    let p = blur_problem(5, 10);
    let bg = p.background;
    let (blur, samples) = synthesize_blur(&p.scene, &p.traj, &p.k, &BlurConfig::new(10).unwrap(), &bg).unwrap();
    let mut mean = ImageBuffer::new(16, 16);
    for i in 0..10 {
        let pose = p.traj.pose_at(i as f64 / 9.0).unwrap();
        let (img, _) = render_forward(&p.scene, &pose, &p.k, &bg);
        mean.add_scaled(&img, 1.0);
        assert_eq!(samples[i].pose, pose);
    }
    mean.scale(0.1);
    assert!(blur.max_abs_diff(&mean) < 1e-12);
}

#[test]
fn per_sample_weight_scales_with_one_over_n() {
    let p = blur_problem(2, 2);
    let pose = p.traj.knots()[0];
    let traj = TrajectorySpline::linear(pose, pose);
    let mean_screen = |n: usize| {
        let (_, samples) = synthesize_blur(&p.scene, &traj, &p.k, &BlurConfig::new(n).unwrap(), &p.background).unwrap();
        let (g, _) = blur_backward(&samples, &p.weights, &p.scene, &traj, &p.k).unwrap();
        let mut s = p.scene.clone();
        s.accumulate_screen_gradients(&g.screen_grad_norms, &g.visible_counts);
        (0..s.len()).map(|i| s.mean_screen_gradient(i)).collect::<Vec<_>>()
    };
    let (a, b) = (mean_screen(5), mean_screen(10));
    assert!(a.iter().any(|v| *v > 0.0));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - 2.0 * y).abs() <= 1e-12 * x.abs().max(1e-30), "{x} vs {y}");
    }
}

proptest! {
    #![proptest_config(common::proptest_config(24))]

    #[test]
    fn more_samples_converge_monotonically(seed in 0u64..1000, rot in 0.02f64..0.1, trans in 0.05f64..0.2) {
        let p = blur_problem(seed, 2);
        let start = p.traj.knots()[0];
        let end = start.perturbed(&Twist::from_slice(&[trans, -0.5 * trans, 0.0, 0.3 * rot, rot, -0.2 * rot]));
        let traj = TrajectorySpline::linear(start, end);
        let blur = |n: usize| synthesize_blur(&p.scene, &traj, &p.k, &BlurConfig::new(n).unwrap(), &p.background).unwrap().0;
        let reference = blur(201);
        let errs: Vec<f64> = [3, 5, 10, 20, 50].iter().map(|n| blur(*n).max_abs_diff(&reference)).collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0], "{errs:?}");
        }
    }

    #[test]
    fn static_camera_blur_is_sharp_render(seed in 0u64..1000, n in 2usize..16) {
        let p = blur_problem(seed, n);
        let pose = se3_exp(&Twist::from_slice(&[0.01 * (seed % 7) as f64, 0.0, 0.05, 0.0, 0.02, 0.0]));
        let traj = TrajectorySpline::linear(pose, pose);
        let (blur, _) = synthesize_blur(&p.scene, &traj, &p.k, &BlurConfig::new(n).unwrap(), &Vector3::new(0.2, 0.2, 0.2)).unwrap();
        let (sharp, _) = render_forward(&p.scene, &pose, &p.k, &Vector3::new(0.2, 0.2, 0.2));
        prop_assert!(blur.max_abs_diff(&sharp) < 1e-6);
    }
}
