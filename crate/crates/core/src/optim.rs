//! Photometric loss, Adam, and the joint scene / trajectory training loop.

use std::fmt::Write as _;

use nalgebra::{Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blur::{blur_backward, synthesize_blur, BlurConfig, BlurError};
use crate::image::ImageBuffer;
use crate::lie::{TrajectorySpline, Twist};
use crate::metrics::ssim_padded_with_grad;
use crate::projection::Intrinsics;
use crate::scene::{densify_and_prune, DensifyConfig, GaussianScene};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;
/// Stored quaternions are renormalized once their norm drifts past this.
pub const QUAT_NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iter}: {dump}")]
    NonFiniteLoss { iter: usize, dump: String },
    #[error(transparent)]
    Blur(#[from] BlurError),
}

/// `(1 - λ) L1 + λ (1 - SSIM)` and its gradient w.r.t. `pred`.
pub fn compute_loss(pred: &ImageBuffer, target: &ImageBuffer, lambda: f64) -> Result<(f64, ImageBuffer), OptimError> {
    if !pred.same_shape(target) {
        return Err(OptimError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            target.width(),
            target.height()
        )));
    }
    let n = pred.data().len().max(1) as f64;
    let mut grad = ImageBuffer::new(pred.width(), pred.height());
    let mut l1 = 0.0;
    let w1 = (1.0 - lambda) / n;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        l1 += d.abs();
        *g = if d > 0.0 {
            w1
        } else if d < 0.0 {
            -w1
        } else {
            0.0
        };
    }
    l1 /= n;
    if lambda == 0.0 {
        return Ok(((1.0 - lambda) * l1, grad));
    }
    let (s, ds) = ssim_padded_with_grad(pred, target).map_err(|e| OptimError::ShapeMismatch(e.to_string()))?;
    grad.add_scaled(&ds, -lambda);
    Ok(((1.0 - lambda) * l1 + lambda * (1.0 - s), grad))
}

/// Adam moments for one flat parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Re-indexes rows of `width` values after densification: surviving rows
    /// keep their moments, new rows start at zero.
    pub fn remap(&mut self, sources: &[Option<usize>], width: usize) {
        let mut m = vec![0.0; sources.len() * width];
        let mut v = vec![0.0; sources.len() * width];
        for (row, src) in sources.iter().enumerate() {
            if let Some(s) = src {
                m[row * width..(row + 1) * width].copy_from_slice(&self.m[s * width..(s + 1) * width]);
                v[row * width..(row + 1) * width].copy_from_slice(&self.v[s * width..(s + 1) * width]);
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<(), OptimError> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(OptimError::ShapeMismatch(format!(
            "params {}, grads {}, moments {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// `start * (end / start)^(t / total)`.
pub fn exp_decay(start: f64, end: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return start;
    }
    let f = (t as f64 / total as f64).clamp(0.0, 1.0);
    start * (end / start).powf(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLearningRates {
    /// Position rates are multiplied by the scene extent.
    pub position_start: f64,
    pub position_end: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for SceneLearningRates {
    fn default() -> Self {
        SceneLearningRates {
            position_start: 1.6e-4,
            position_end: 1.6e-6,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lambda: f64,
    pub pose_lr_start: f64,
    pub pose_lr_end: f64,
    pub scene_lr: SceneLearningRates,
    pub scene_extent: f64,
    pub n_virtual: usize,
    pub densify: DensifyConfig,
    pub densify_enabled: bool,
    pub optimize_scene: bool,
    pub optimize_poses: bool,
    pub seed: u64,
    pub background: [f64; 3],
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 7000,
            lambda: 0.2,
            pose_lr_start: 1e-3,
            pose_lr_end: 1e-5,
            scene_lr: SceneLearningRates::default(),
            scene_extent: 1.0,
            n_virtual: 10,
            densify: DensifyConfig::default(),
            densify_enabled: true,
            optimize_scene: true,
            optimize_poses: true,
            seed: 0,
            background: [0.0; 3],
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let lr = &self.scene_lr;
        let rates = [
            self.pose_lr_start,
            self.pose_lr_end,
            lr.position_start,
            lr.position_end,
            lr.color,
            lr.opacity,
            lr.scale,
            lr.rotation,
        ];
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(OptimError::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(OptimError::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.scene_extent > 0.0) {
            return Err(OptimError::InvalidConfig("scene extent must be positive".into()));
        }
        BlurConfig::new(self.n_virtual)?;
        Ok(())
    }

    pub fn pose_lr(&self, iter: usize) -> f64 {
        exp_decay(self.pose_lr_start, self.pose_lr_end, iter, self.total_iters)
    }

    pub fn position_lr(&self, iter: usize) -> f64 {
        self.scene_extent * exp_decay(self.scene_lr.position_start, self.scene_lr.position_end, iter, self.total_iters)
    }
}

/// One blurry training image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub id: u32,
    pub image: ImageBuffer,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub pose_lr: f64,
    pub gaussians: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    /// Loss of every iteration.
    pub losses: Vec<f64>,
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "iter={} loss={:.8} pose_lr={:.6e} gaussians={}",
                r.iter, r.loss, r.pose_lr, r.gaussians
            );
        }
        s
    }

    /// Median loss over the fractional iteration window `[from, to)`.
    pub fn median_loss(&self, from: f64, to: f64) -> Option<f64> {
        let n = self.losses.len();
        let (a, b) = ((from * n as f64) as usize, ((to * n as f64) as usize).min(n));
        let mut w: Vec<f64> = self.losses.get(a..b)?.to_vec();
        if w.is_empty() {
            return None;
        }
        w.sort_by(f64::total_cmp);
        Some(w[w.len() / 2])
    }
}

/// Adam state for the five scene parameter groups.
#[derive(Debug, Clone, PartialEq)]
struct SceneAdam {
    positions: AdamState,
    log_scales: AdamState,
    rotations: AdamState,
    opacities: AdamState,
    colors: AdamState,
}

impl SceneAdam {
    fn new(n: usize) -> Self {
        SceneAdam {
            positions: AdamState::new(3 * n),
            log_scales: AdamState::new(3 * n),
            rotations: AdamState::new(4 * n),
            opacities: AdamState::new(n),
            colors: AdamState::new(3 * n),
        }
    }

    fn remap(&mut self, sources: &[Option<usize>]) {
        self.positions.remap(sources, 3);
        self.log_scales.remap(sources, 3);
        self.rotations.remap(sources, 4);
        self.opacities.remap(sources, 1);
        self.colors.remap(sources, 3);
    }
}

/// Result of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub scene: GaussianScene,
    pub trajectories: Vec<TrajectorySpline>,
    pub log: TrainLog,
}

fn dump_state(scene: &GaussianScene, view: &TrainView, traj: &TrajectorySpline, pose_lr: f64) -> String {
    let knots: Vec<[f64; 3]> = traj.knots().iter().map(|k| k.translation.into()).collect();
    format!(
        "image {} gaussians {} pose_lr {pose_lr:.3e} knot translations {knots:?} scene check {:?}",
        view.id,
        scene.len(),
        scene.check_invariants().err(),
    )
}

/// Joint optimization of the scene and the per-image trajectories.
///
/// Images are visited in a seeded random order per epoch. Each step
/// synthesizes the blur, backpropagates the loss, takes Adam steps on the
/// scene and on the visited image's knot twists, and folds the twists into
/// the knots.
pub fn train(
    views: &[TrainView],
    init_scene: GaussianScene,
    init_trajs: Vec<TrajectorySpline>,
    cfg: &TrainConfig,
) -> Result<TrainOutput, OptimError> {
    cfg.validate()?;
    if views.is_empty() || views.len() != init_trajs.len() {
        return Err(OptimError::ShapeMismatch(format!(
            "{} views, {} trajectories",
            views.len(),
            init_trajs.len()
        )));
    }
    let blur_cfg = BlurConfig::new(cfg.n_virtual)?;
    let bg = Vector3::from(cfg.background);
    let mut densify_cfg = cfg.densify.clone();
    densify_cfg.scene_extent = cfg.scene_extent;
    densify_cfg.seed ^= cfg.seed;

    let mut scene = init_scene;
    let mut trajs = init_trajs;
    let mut scene_adam = SceneAdam::new(scene.len());
    // All knot twists form one tensor: unvisited images have zero gradient
    // but keep moving on their Adam momentum.
    let offsets: Vec<usize> = trajs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += 6 * t.knots().len();
            Some(o)
        })
        .collect();
    let pose_len: usize = trajs.iter().map(|t| 6 * t.knots().len()).sum();
    let mut pose_adam = AdamState::new(pose_len);
    let mut pose_grad = vec![0.0; pose_len];
    let mut pose_step = vec![0.0; pose_len];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();

    for iter in 0..cfg.total_iters {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let vi = order.pop().unwrap_or(0);
        let view = &views[vi];
        let pose_lr = cfg.pose_lr(iter);

        let (blur, samples) = synthesize_blur(&scene, &trajs[vi], &view.intrinsics, &blur_cfg, &bg)?;
        let (loss, dl) = compute_loss(&blur, &view.image, cfg.lambda)?;
        if !loss.is_finite() {
            return Err(OptimError::NonFiniteLoss {
                iter,
                dump: dump_state(&scene, view, &trajs[vi], pose_lr),
            });
        }
        let (grads, knot_grads) = blur_backward(&samples, &dl, &scene, &trajs[vi], &view.intrinsics)?;
        log.losses.push(loss);
        if cfg.log_every > 0 && iter % cfg.log_every == 0 {
            log.records.push(LogRecord {
                iter,
                loss,
                pose_lr,
                gaussians: scene.len(),
            });
        }

        if cfg.optimize_scene {
            let lr = &cfg.scene_lr;
            let a = &mut scene_adam;
            adam_step(scene.positions.as_flattened_mut(), grads.d_positions.as_flattened(), &mut a.positions, cfg.position_lr(iter))?;
            adam_step(scene.log_scales.as_flattened_mut(), grads.d_log_scales.as_flattened(), &mut a.log_scales, lr.scale)?;
            adam_step(scene.rotations.as_flattened_mut(), grads.d_rotations.as_flattened(), &mut a.rotations, lr.rotation)?;
            adam_step(&mut scene.raw_opacities, &grads.d_raw_opacities, &mut a.opacities, lr.opacity)?;
            adam_step(scene.colors.as_flattened_mut(), grads.d_colors.as_flattened(), &mut a.colors, lr.color)?;
            // Leaves unit quaternions bit-identical so an exact optimum stays put.
            for q in &mut scene.rotations {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (n - 1.0).abs() > QUAT_NORM_TOL {
                    q.iter_mut().for_each(|v| *v /= n);
                }
            }
            if cfg.densify_enabled {
                scene.accumulate_screen_gradients(&grads.screen_grad_norms, &grads.visible_counts);
                if densify_cfg.is_due(iter + 1, cfg.total_iters) {
                    let report = densify_and_prune(&mut scene, iter + 1, &densify_cfg, cfg.n_virtual);
                    scene_adam.remap(&report.sources);
                }
            }
        }

        if cfg.optimize_poses {
            pose_grad.iter_mut().for_each(|g| *g = 0.0);
            pose_step.iter_mut().for_each(|p| *p = 0.0);
            for (k, g) in knot_grads.iter().enumerate() {
                pose_grad[offsets[vi] + 6 * k..offsets[vi] + 6 * k + 6].copy_from_slice(g.0.as_slice());
            }
            adam_step(&mut pose_step, &pose_grad, &mut pose_adam, pose_lr)?;
            for (traj, &o) in trajs.iter_mut().zip(&offsets) {
                for k in 0..traj.knots().len() {
                    let d = Vector6::from_column_slice(&pose_step[o + 6 * k..o + 6 * k + 6]);
                    traj.set_knot_delta(k, Twist(d));
                }
                traj.fold_deltas();
            }
        }
    }
    Ok(TrainOutput {
        scene,
        trajectories: trajs,
        log,
    })
}
