//! The learnable Gaussian scene and its densification rules.

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::lie::Rotation;

/// Activated opacity given to freshly initialized Gaussians.
pub const INIT_OPACITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("cannot initialize a scene from an empty point cloud")]
    EmptyCloud,
    #[error("point cloud has {points} points but {colors} colors")]
    ColorCountMismatch { points: usize, colors: usize },
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Symmetric PSD 3x3 covariance in world units squared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3D(pub Matrix3<f64>);

/// `R diag(s) diag(s)^T R^T` with `s = exp(log_scale)`.
pub fn covariance_from_scale_rotation(log_scale: &Vector3<f64>, q: &Rotation) -> Covariance3D {
    let r = q.matrix();
    let s2 = log_scale.map(|l| (2.0 * l).exp());
    let rs = r * Matrix3::from_diagonal(&s2);
    let mut cov = rs * r.transpose();
    // exact symmetry
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let m = 0.5 * (cov[(i, j)] + cov[(j, i)]);
        cov[(i, j)] = m;
        cov[(j, i)] = m;
    }
    Covariance3D(cov)
}

/// Activated view of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Rotation,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn covariance(&self) -> Covariance3D {
        covariance_from_scale_rotation(&self.log_scale, &self.rotation)
    }
}

/// Structure-of-arrays Gaussian parameters in their unconstrained form.
///
/// Rotations are stored `(w, x, y, z)`; training renormalizes them whenever
/// an optimizer step moves the norm away from 1. `grad_accum`/`grad_count`
/// hold the running sum and count of screen-space positional gradient norms
/// used by densification.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianScene {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub raw_opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u32>,
}

impl GaussianScene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: &Gaussian) {
        self.positions.push(g.position.into());
        self.log_scales.push(g.log_scale.into());
        self.rotations.push(g.rotation.wxyz());
        self.raw_opacities.push(logit(g.opacity));
        self.colors.push(g.color.into());
        self.grad_accum.push(0.0);
        self.grad_count.push(0);
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    pub fn log_scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.log_scales[i])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        self.log_scale(i).map(f64::exp)
    }

    pub fn rotation(&self, i: usize) -> Rotation {
        let [w, x, y, z] = self.rotations[i];
        Rotation::from_wxyz(w, x, y, z)
    }

    pub fn raw_rotation(&self, i: usize) -> Vector4<f64> {
        Vector4::from(self.rotations[i])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.raw_opacities[i])
    }

    pub fn color(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.colors[i])
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.position(i),
            log_scale: self.log_scale(i),
            rotation: self.rotation(i),
            opacity: self.opacity(i),
            color: self.color(i),
        }
    }

    pub fn covariance(&self, i: usize) -> Covariance3D {
        covariance_from_scale_rotation(&self.log_scale(i), &self.rotation(i))
    }

    /// Projects every stored quaternion back to unit norm, `w >= 0`.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = Rotation::from_wxyz(q[0], q[1], q[2], q[3]).wxyz();
        }
    }

    /// Adds per-Gaussian screen-gradient norm sums and visibility counts.
    pub fn accumulate_screen_gradients(&mut self, norm_sums: &[f64], counts: &[u32]) {
        for (i, (s, c)) in norm_sums.iter().zip(counts).enumerate() {
            self.grad_accum[i] += s;
            self.grad_count[i] += c;
        }
    }

    /// Mean accumulated screen-gradient norm per Gaussian.
    pub fn mean_screen_gradient(&self, i: usize) -> f64 {
        match self.grad_count[i] {
            0 => 0.0,
            c => self.grad_accum[i] / f64::from(c),
        }
    }

    pub fn reset_screen_gradients(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
    }

    /// Checks array lengths, finiteness and quaternion norms.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.len();
        let lens = [
            self.log_scales.len(),
            self.rotations.len(),
            self.raw_opacities.len(),
            self.colors.len(),
            self.grad_accum.len(),
            self.grad_count.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(format!("inconsistent array lengths: {n} vs {lens:?}"));
        }
        for i in 0..n {
            let finite = self.positions[i]
                .iter()
                .chain(&self.log_scales[i])
                .chain(&self.rotations[i])
                .chain(&self.colors[i])
                .chain(std::iter::once(&self.raw_opacities[i]))
                .all(|v| v.is_finite());
            if !finite {
                return Err(format!("gaussian {i} has a non-finite parameter"));
            }
            let qn = self.raw_rotation(i).norm();
            if (qn - 1.0).abs() > 1e-9 {
                return Err(format!("gaussian {i} quaternion norm {qn}"));
            }
            let o = self.opacity(i);
            if !(o > 0.0 && o < 1.0) {
                return Err(format!("gaussian {i} opacity {o} outside (0, 1)"));
            }
            if self.scale(i).iter().any(|&s| s <= 0.0) {
                return Err(format!("gaussian {i} has a non-positive scale"));
            }
        }
        Ok(())
    }

    fn copy_row(&mut self, src: &GaussianScene, i: usize) {
        self.positions.push(src.positions[i]);
        self.log_scales.push(src.log_scales[i]);
        self.rotations.push(src.rotations[i]);
        self.raw_opacities.push(src.raw_opacities[i]);
        self.colors.push(src.colors[i]);
        self.grad_accum.push(0.0);
        self.grad_count.push(0);
    }
}

/// One Gaussian per point, isotropic scale from the three nearest neighbors.
///
/// A cloud with no usable neighbor distance falls back to
/// `0.01 * scene_extent`.
pub fn init_from_pointcloud(
    points: &[Vector3<f64>],
    colors: &[Vector3<f64>],
    scene_extent: f64,
) -> Result<GaussianScene, SceneError> {
    if points.is_empty() {
        return Err(SceneError::EmptyCloud);
    }
    if points.len() != colors.len() {
        return Err(SceneError::ColorCountMismatch {
            points: points.len(),
            colors: colors.len(),
        });
    }
    let fallback = 0.01 * scene_extent;
    let mut scene = GaussianScene::new();
    let mut dists = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        dists.clear();
        dists.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm()),
        );
        let k = dists.len().min(3);
        let scale = if k == 0 {
            fallback
        } else {
            dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            let mean = dists[..k].iter().sum::<f64>() / k as f64;
            if mean > 0.0 {
                mean
            } else {
                fallback
            }
        };
        scene.push(&Gaussian {
            position: *p,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Rotation::identity(),
            opacity: INIT_OPACITY,
            color: colors[i],
        });
    }
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyConfig {
    /// Screen-gradient threshold calibrated at `reference_n_virtual` samples.
    pub grad_threshold: f64,
    pub reference_n_virtual: usize,
    /// Clone/split boundary as a fraction of `scene_extent`.
    pub percent_dense: f64,
    pub scene_extent: f64,
    pub min_opacity: f64,
    pub split_scale_divisor: f64,
    pub interval: usize,
    pub start_iter: usize,
    /// Densification stops after this fraction of the run.
    pub stop_fraction: f64,
    pub seed: u64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            reference_n_virtual: 10,
            percent_dense: 0.01,
            scene_extent: 1.0,
            min_opacity: 0.005,
            split_scale_divisor: 1.6,
            interval: 100,
            start_iter: 500,
            stop_fraction: 0.6,
            seed: 0,
        }
    }
}

impl DensifyConfig {
    /// Gradient threshold rescaled for `n_virtual` blur samples.
    pub fn effective_threshold(&self, n_virtual: usize) -> f64 {
        self.grad_threshold * self.reference_n_virtual as f64 / n_virtual as f64
    }

    /// Whether densification runs after iteration `iter` (1-based) of `total`.
    pub fn is_due(&self, iter: usize, total: usize) -> bool {
        self.interval > 0
            && iter >= self.start_iter
            && (iter as f64) <= self.stop_fraction * total as f64
            && iter % self.interval == 0
    }
}

/// What a densification pass did, plus the provenance of every new row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// For each Gaussian after the pass: its index before the pass, or
    /// `None` for newly created ones.
    pub sources: Vec<Option<usize>>,
}

/// Clones small and splits large high-gradient Gaussians, then prunes
/// near-transparent ones. Accumulated gradients are reset.
pub fn densify_and_prune(
    scene: &mut GaussianScene,
    iter: usize,
    cfg: &DensifyConfig,
    n_virtual: usize,
) -> DensifyReport {
    let threshold = cfg.effective_threshold(n_virtual);
    let size_limit = cfg.percent_dense * cfg.scene_extent;
    let n = scene.len();
    let mut clone = Vec::new();
    let mut split = vec![false; n];
    for i in 0..n {
        if scene.mean_screen_gradient(i) > threshold {
            if scene.scale(i).max() <= size_limit {
                clone.push(i);
            } else {
                split[i] = true;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut next = GaussianScene::new();
    let mut sources = Vec::with_capacity(n + clone.len() + split.len());
    for i in (0..n).filter(|&i| !split[i]) {
        next.copy_row(scene, i);
        sources.push(Some(i));
    }
    for &i in &clone {
        next.copy_row(scene, i);
        sources.push(None);
    }
    let shrink = cfg.split_scale_divisor.ln();
    let mut split_count = 0;
    for i in (0..n).filter(|&i| split[i]) {
        split_count += 1;
        let r = scene.rotation(i).matrix();
        let s = scene.scale(i);
        for _ in 0..2 {
            let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let offset: Vector3<f64> = r * s.component_mul(&z);
            next.copy_row(scene, i);
            let last = next.len() - 1;
            next.positions[last] = (scene.position(i) + offset).into();
            next.log_scales[last] = scene.log_scales[i].map(|l| l - shrink);
            sources.push(None);
        }
    }

    let keep: Vec<bool> = (0..next.len())
        .map(|i| next.opacity(i) >= cfg.min_opacity)
        .collect();
    let pruned = keep.iter().filter(|k| !**k).count();
    let mut out = GaussianScene::new();
    let mut out_sources = Vec::with_capacity(next.len() - pruned);
    for i in (0..next.len()).filter(|&i| keep[i]) {
        out.copy_row(&next, i);
        out_sources.push(sources[i]);
    }
    *scene = out;
    DensifyReport {
        cloned: clone.len(),
        split: split_count,
        pruned,
        sources: out_sources,
    }
}
