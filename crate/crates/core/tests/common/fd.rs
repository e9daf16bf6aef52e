//! Central finite-difference oracle for render and blur gradients.
//!
//! Rendering is piecewise smooth: a contribution crossing the alpha skip,
//! clamp or termination thresholds is a jump. An FD bracket is only a valid
//! oracle when the contribution structure is identical at both ends.

use blursplat::blur::{blur_backward, synthesize_blur, BlurConfig};
use blursplat::image::ImageBuffer;
use blursplat::lie::{Pose, TrajectorySpline, Twist};
use blursplat::projection::{project_scene, Intrinsics};
use blursplat::rasterizer::rasterize;
use blursplat::scene::GaussianScene;
use nalgebra::{Vector3, Vector6};

use super::{dot, rel_err};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const FLOOR: f64 = 1e-6;

pub type Structure = Vec<Vec<(u32, usize, bool)>>;

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    pub mismatches: Vec<String>,
    pub unstable: Vec<String>,
}

impl FdReport {
    pub fn compare(&mut self, name: String, analytic: f64, base: &Structure, eval: impl Fn(f64) -> Option<(f64, Structure)>) {
        let (Some((lp, sp)), Some((lm, sm))) = (eval(STEP), eval(-STEP)) else {
            self.unstable.push(name);
            return;
        };
        if &sp != base || &sm != base {
            self.unstable.push(name);
            return;
        }
        let fd = (lp - lm) / (2.0 * STEP);
        let e = rel_err(analytic, fd, FLOOR);
        self.checked += 1;
        self.worst = self.worst.max(e);
        if e >= TOLERANCE {
            self.mismatches.push(format!("{name}: analytic {analytic:.9e} fd {fd:.9e} rel {e:.3e}"));
        }
    }
}

/// Copy of `scene` with one raw parameter shifted by `h`.
/// Classes: 0 position, 1 log-scale, 2 rotation, 3 raw opacity, 4 color.
pub fn perturb(scene: &GaussianScene, class: usize, i: usize, c: usize, h: f64) -> GaussianScene {
    let mut s = scene.clone();
    match class {
        0 => s.positions[i][c] += h,
        1 => s.log_scales[i][c] += h,
        2 => s.rotations[i][c] += h,
        3 => s.raw_opacities[i] += h,
        _ => s.colors[i][c] += h,
    }
    s
}

pub const CLASSES: [(&str, usize); 5] = [("position", 3), ("log_scale", 3), ("rotation", 4), ("opacity", 1), ("color", 3)];

/// Linear loss `<blur(scene, traj), weights>` of a blurred render.
pub struct BlurProblem {
    pub scene: GaussianScene,
    pub traj: TrajectorySpline,
    pub k: Intrinsics,
    pub n_virtual: usize,
    pub background: Vector3<f64>,
    pub weights: ImageBuffer,
}

impl BlurProblem {
    fn poses(&self, traj: &TrajectorySpline) -> Vec<Pose> {
        BlurConfig::new(self.n_virtual).unwrap().sample_times().iter().map(|u| traj.pose_at(*u).unwrap()).collect()
    }

    /// Loss and structure; with `frozen`, each sample's 2D covariances stay
    /// at their values under the unperturbed trajectory.
    pub fn eval(&self, scene: &GaussianScene, traj: &TrajectorySpline, frozen: bool) -> Option<(f64, Structure)> {
        let base = self.poses(&self.traj);
        let mut img = ImageBuffer::new(self.k.width, self.k.height);
        let mut structure = Vec::new();
        for (pose, base_pose) in self.poses(traj).iter().zip(&base) {
            let mut projected = project_scene(scene, pose, &self.k);
            if frozen {
                let reference = project_scene(scene, base_pose, &self.k);
                for g in &mut projected {
                    g.cov2d = reference.iter().find(|r| r.source_index == g.source_index)?.cov2d;
                }
            }
            let (sample, aux) = rasterize(projected, &self.k, &self.background, scene.len());
            img.add_scaled(&sample, 1.0 / self.n_virtual as f64);
            structure.push(aux.structure());
        }
        Some((dot(&img, &self.weights), structure))
    }

    /// Compares every scene parameter and every knot-twist component.
    pub fn check(&self) -> FdReport {
        let cfg = BlurConfig::new(self.n_virtual).unwrap();
        let (_, samples) = synthesize_blur(&self.scene, &self.traj, &self.k, &cfg, &self.background).unwrap();
        let (g, knots) = blur_backward(&samples, &self.weights, &self.scene, &self.traj, &self.k).unwrap();
        let base: Structure = samples.iter().map(|s| s.aux.structure()).collect();
        let mut report = FdReport::default();
        for i in 0..self.scene.len() {
            for (class, (name, dims)) in CLASSES.iter().enumerate() {
                for c in 0..*dims {
                    let analytic = match class {
                        0 => g.d_positions[i][c],
                        1 => g.d_log_scales[i][c],
                        2 => g.d_rotations[i][c],
                        3 => g.d_raw_opacities[i],
                        _ => g.d_colors[i][c],
                    };
                    report.compare(format!("{name}[{i}][{c}]"), analytic, &base, |h| {
                        self.eval(&perturb(&self.scene, class, i, c, h), &self.traj, false)
                    });
                }
            }
        }
        for (j, knot) in knots.iter().enumerate() {
            for c in 0..6 {
                report.compare(format!("knot[{j}][{c}]"), knot.0[c], &base, |h| {
                    let mut t = self.traj.clone();
                    let mut e = Vector6::zeros();
                    e[c] = h;
                    t.set_knot_delta(j, Twist(e));
                    self.eval(&self.scene, &t, true)
                });
            }
        }
        report
    }
}
