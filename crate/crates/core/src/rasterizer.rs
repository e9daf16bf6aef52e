//! Front-to-back alpha compositing of projected Gaussians and its exact
//! reverse pass.
//!
//! Gaussians are globally sorted by camera depth (ties by source index) and
//! splatted one after another over the pixels their footprint can reach.
//! Each pixel therefore sees its contributors in depth order, exactly as a
//! per-pixel front-to-back loop would. The footprint bound is the radius
//! beyond which `alpha` is provably below the skip threshold, so restricting
//! the loop to it changes no pixel value.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use thiserror::Error;

use crate::image::ImageBuffer;
use crate::lie::{Pose, Twist};
use crate::projection::{project_scene, Intrinsics, ProjectedGaussian};
use crate::scene::GaussianScene;

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops before transmittance would fall below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RenderError {
    #[error("render aux does not match inputs: {0}")]
    AuxMismatch(String),
}

/// One Gaussian's contribution to one pixel, in compositing order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub pixel: u32,
    /// Index into [`RenderAux::projected`].
    pub slot: u32,
    pub alpha: f64,
    /// Transmittance in front of this contribution.
    pub transmittance: f64,
    /// Whether `alpha` hit [`ALPHA_MAX`].
    pub clamped: bool,
}

/// Replay data of a forward render.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderAux {
    pub width: usize,
    pub height: usize,
    pub scene_len: usize,
    pub background: Vector3<f64>,
    pub projected: Vec<ProjectedGaussian>,
    /// Grouped by Gaussian in depth order; within a pixel, front to back.
    pub contributions: Vec<Contribution>,
    pub final_transmittance: Vec<f64>,
}

impl RenderAux {
    /// Contributions of one pixel, front to back.
    pub fn pixel_contributions(&self, x: usize, y: usize) -> Vec<Contribution> {
        let p = (y * self.width + x) as u32;
        self.contributions.iter().filter(|c| c.pixel == p).copied().collect()
    }

    /// `(pixel, source index, clamped)` per contribution. The render is a
    /// smooth function of its inputs wherever this stays unchanged.
    pub fn structure(&self) -> Vec<(u32, usize, bool)> {
        self.contributions
            .iter()
            .map(|c| (c.pixel, self.projected[c.slot as usize].source_index, c.clamped))
            .collect()
    }
}

/// Partials of a scalar loss w.r.t. scene parameters and the camera pose.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientBundle {
    pub d_positions: Vec<[f64; 3]>,
    pub d_log_scales: Vec<[f64; 3]>,
    /// W.r.t. the stored (pre-normalization) quaternion.
    pub d_rotations: Vec<[f64; 4]>,
    pub d_raw_opacities: Vec<f64>,
    pub d_colors: Vec<[f64; 3]>,
    /// Left-perturbation twist of the world-to-camera pose, mean path only.
    pub d_pose: Twist,
    /// Per Gaussian: sum over renders of `|dL/d mean2d|` in NDC units.
    pub screen_grad_norms: Vec<f64>,
    /// Per Gaussian: number of renders in which it was not culled.
    pub visible_counts: Vec<u32>,
}

impl GradientBundle {
    pub fn zeros(n: usize) -> Self {
        GradientBundle {
            d_positions: vec![[0.0; 3]; n],
            d_log_scales: vec![[0.0; 3]; n],
            d_rotations: vec![[0.0; 4]; n],
            d_raw_opacities: vec![0.0; n],
            d_colors: vec![[0.0; 3]; n],
            d_pose: Twist::zero(),
            screen_grad_norms: vec![0.0; n],
            visible_counts: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_positions.is_empty()
    }

    /// Element-wise sum of the scene parts, keeping `d_pose` of `self`.
    pub fn accumulate_scene(&mut self, other: &GradientBundle) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.as_flattened_mut().iter_mut().zip(b.as_flattened()) {
                *x += y;
            }
        }
        add(&mut self.d_positions, &other.d_positions);
        add(&mut self.d_log_scales, &other.d_log_scales);
        add(&mut self.d_rotations, &other.d_rotations);
        add(&mut self.d_colors, &other.d_colors);
        for (x, y) in self.d_raw_opacities.iter_mut().zip(&other.d_raw_opacities) {
            *x += y;
        }
        for (x, y) in self.screen_grad_norms.iter_mut().zip(&other.screen_grad_norms) {
            *x += y;
        }
        for (x, y) in self.visible_counts.iter_mut().zip(&other.visible_counts) {
            *x += y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_positions
            .as_flattened()
            .iter()
            .chain(self.d_log_scales.as_flattened())
            .chain(self.d_rotations.as_flattened())
            .chain(self.d_colors.as_flattened())
            .chain(&self.d_raw_opacities)
            .chain(self.d_pose.0.iter())
            .all(|v| v.is_finite())
    }
}

/// Renders `scene` from a world-to-camera `pose`.
pub fn render_forward(
    scene: &GaussianScene,
    pose: &Pose,
    k: &Intrinsics,
    background: &Vector3<f64>,
) -> (ImageBuffer, RenderAux) {
    rasterize(project_scene(scene, pose, k), k, background, scene.len())
}

/// Composites already-projected Gaussians.
pub fn rasterize(
    projected: Vec<ProjectedGaussian>,
    k: &Intrinsics,
    background: &Vector3<f64>,
    scene_len: usize,
) -> (ImageBuffer, RenderAux) {
    let (w, h) = (k.width, k.height);
    let npix = w * h;
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        projected[a]
            .depth
            .total_cmp(&projected[b].depth)
            .then(projected[a].source_index.cmp(&projected[b].source_index))
    });

    let mut accum = vec![Vector3::<f64>::zeros(); npix];
    let mut trans = vec![1.0f64; npix];
    let mut done = vec![false; npix];
    let mut contributions = Vec::new();

    for &slot in &order {
        let g = &projected[slot];
        let Some((x0, x1, y0, y1)) = footprint(g, w, h) else {
            continue;
        };
        let (ca, cb, cc) = g.conic();
        // alpha >= ALPHA_MIN  <=>  power >= cutoff; used only to skip work,
        // with slack so the exact test below decides every borderline pixel.
        let cutoff = (ALPHA_MIN / g.opacity).ln();
        let slack = cutoff - 1e-9;
        for py in y0..y1 {
            let dy = py as f64 + 0.5 - g.mean2d.y;
            let Some((sx0, sx1)) = row_span(ca, cb, cc, dy, cutoff, g.mean2d.x, x0, x1) else {
                continue;
            };
            for px in sx0..sx1 {
                let p = py * w + px;
                if done[p] {
                    continue;
                }
                let dx = px as f64 + 0.5 - g.mean2d.x;
                let power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
                if power < slack {
                    continue;
                }
                let raw = g.opacity * power.exp();
                let clamped = raw > ALPHA_MAX;
                let alpha = if clamped { ALPHA_MAX } else { raw };
                if alpha < ALPHA_MIN {
                    continue;
                }
                let t = trans[p];
                let next_t = t * (1.0 - alpha);
                if next_t < MIN_TRANSMITTANCE {
                    done[p] = true;
                    continue;
                }
                accum[p] += g.color * (alpha * t);
                contributions.push(Contribution {
                    pixel: p as u32,
                    slot: slot as u32,
                    alpha,
                    transmittance: t,
                    clamped,
                });
                trans[p] = next_t;
            }
        }
    }

    let mut img = ImageBuffer::new(w, h);
    for (p, (c, t)) in accum.iter().zip(&trans).enumerate() {
        img.set_pixel(p % w, p / w, c + background * *t);
    }
    let aux = RenderAux {
        width: w,
        height: h,
        scene_len,
        background: *background,
        projected,
        contributions,
        final_transmittance: trans,
    };
    (img, aux)
}

// Pixel range outside which alpha < ALPHA_MIN is guaranteed.
fn footprint(g: &ProjectedGaussian, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
    let ratio = g.opacity.min(ALPHA_MAX) / ALPHA_MIN;
    if ratio <= 1.0 {
        return None;
    }
    let radius = (2.0 * ratio.ln() * g.max_eigenvalue()).sqrt() + 1.0;
    let lo = |c: f64| (c - radius - 0.5).floor().max(0.0);
    let x0 = lo(g.mean2d.x) as usize;
    let y0 = lo(g.mean2d.y) as usize;
    let x1 = ((g.mean2d.x + radius + 0.5).ceil().max(0.0) as usize).min(w);
    let y1 = ((g.mean2d.y + radius + 0.5).ceil().max(0.0) as usize).min(h);
    (x0 < x1 && y0 < y1).then_some((x0, x1, y0, y1))
}

// Columns of row offset `dy` whose power can reach `cutoff`, widened by one
// pixel on each side and clipped to `[x0, x1)`.
#[allow(clippy::too_many_arguments)]
fn row_span(ca: f64, cb: f64, cc: f64, dy: f64, cutoff: f64, mx: f64, x0: usize, x1: usize) -> Option<(usize, usize)> {
    // 0.5 ca dx^2 + cb dy dx + 0.5 cc dy^2 + cutoff <= 0
    let disc = cb * cb * dy * dy - ca * (cc * dy * dy + 2.0 * cutoff);
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let lo = (-cb * dy - root) / ca + mx - 0.5;
    let hi = (-cb * dy + root) / ca + mx - 0.5;
    let sx0 = ((lo.floor() - 1.0).max(x0 as f64)) as usize;
    let sx1 = ((hi.ceil() + 2.0).min(x1 as f64).max(0.0)) as usize;
    (sx0 < sx1).then_some((sx0, sx1))
}

// Screen-space partials for one projected Gaussian.
#[derive(Clone, Copy, Default)]
struct SlotGrad {
    mean2d: Vector2<f64>,
    conic: Vector3<f64>,
    opacity: f64,
    color: Vector3<f64>,
}

fn check_aux(
    scene: &GaussianScene,
    k: &Intrinsics,
    aux: &RenderAux,
    dl_dimage: &ImageBuffer,
) -> Result<(), RenderError> {
    if aux.scene_len != scene.len() {
        return Err(RenderError::AuxMismatch(format!(
            "aux built for {} gaussians, scene has {}",
            aux.scene_len,
            scene.len()
        )));
    }
    if aux.width != k.width || aux.height != k.height {
        return Err(RenderError::AuxMismatch(format!(
            "aux is {}x{}, camera is {}x{}",
            aux.width, aux.height, k.width, k.height
        )));
    }
    if dl_dimage.width() != k.width || dl_dimage.height() != k.height {
        return Err(RenderError::AuxMismatch(format!(
            "image gradient is {}x{}, camera is {}x{}",
            dl_dimage.width(),
            dl_dimage.height(),
            k.width,
            k.height
        )));
    }
    if aux.projected.iter().any(|g| g.source_index >= scene.len()) {
        return Err(RenderError::AuxMismatch("projected index out of range".into()));
    }
    Ok(())
}

/// Reverse pass of [`render_forward`] for the loss gradient `dl_dimage`.
///
/// Scene partials are exact. The pose partial follows only the projected
/// means; the dependence of the 2D covariance on the pose is dropped.
pub fn render_backward(
    scene: &GaussianScene,
    pose: &Pose,
    k: &Intrinsics,
    aux: &RenderAux,
    dl_dimage: &ImageBuffer,
) -> Result<GradientBundle, RenderError> {
    check_aux(scene, k, aux, dl_dimage)?;
    let w = aux.width;
    let dl = dl_dimage.data();
    let mut slots = vec![SlotGrad::default(); aux.projected.len()];
    let mut behind: Vec<Vector3<f64>> = aux
        .final_transmittance
        .iter()
        .map(|t| aux.background * *t)
        .collect();

    for c in aux.contributions.iter().rev() {
        let p = c.pixel as usize;
        let slot = c.slot as usize;
        let g = &aux.projected[slot];
        let dldc = Vector3::new(dl[3 * p], dl[3 * p + 1], dl[3 * p + 2]);
        let weight = c.alpha * c.transmittance;
        let sg = &mut slots[slot];
        sg.color += dldc * weight;
        let d_alpha = c.transmittance * g.color.dot(&dldc) - behind[p].dot(&dldc) / (1.0 - c.alpha);
        behind[p] += g.color * weight;
        if c.clamped {
            continue;
        }
        let gauss = c.alpha / g.opacity;
        sg.opacity += d_alpha * gauss;
        let d_gauss = d_alpha * g.opacity;
        let (ca, cb, cc) = g.conic();
        let dx = (p % w) as f64 + 0.5 - g.mean2d.x;
        let dy = (p / w) as f64 + 0.5 - g.mean2d.y;
        let s = d_gauss * gauss;
        sg.mean2d += Vector2::new(ca * dx + cb * dy, cb * dx + cc * dy) * s;
        sg.conic += Vector3::new(-0.5 * dx * dx, -dx * dy, -0.5 * dy * dy) * s;
    }

    let n = scene.len();
    let mut out = GradientBundle::zeros(n);
    let rot_c = pose.rotation_matrix();
    let ndc = Vector2::new(0.5 * k.width as f64, 0.5 * k.height as f64);
    let mut d_pose = nalgebra::Vector6::zeros();

    for (g, sg) in aux.projected.iter().zip(&slots) {
        let i = g.source_index;
        out.d_colors[i] = (Vector3::from(out.d_colors[i]) + sg.color).into();
        let o = g.opacity;
        out.d_raw_opacities[i] += sg.opacity * o * (1.0 - o);
        out.screen_grad_norms[i] += sg.mean2d.component_mul(&ndc).norm();
        out.visible_counts[i] += 1;

        let mu_c = g.mean_cam;
        let jac = crate::projection::projection_jacobian(&mu_c, k).expect("projected depth is positive");

        // conic -> 2D covariance
        let (a, b, c) = (g.cov2d[(0, 0)], g.cov2d[(0, 1)], g.cov2d[(1, 1)]);
        let det = a * c - b * b;
        let det2 = det * det;
        let (ga, gb, gc) = (sg.conic.x, sg.conic.y, sg.conic.z);
        let g_a = (-c * c * ga + b * c * gb - b * b * gc) / det2;
        let g_c = (-b * b * ga + a * b * gb - a * a * gc) / det2;
        let g_b = (2.0 * b * c * ga - (a * c + b * b) * gb + 2.0 * a * b * gc) / det2;
        let g_cov2d = Matrix2::new(g_a, 0.5 * g_b, 0.5 * g_b, g_c);

        let sigma = scene.covariance(i).0;
        let m = jac * rot_c;
        let g_sigma: Matrix3<f64> = m.transpose() * g_cov2d * m;
        let g_m: Matrix2x3<f64> = g_cov2d * m * sigma * 2.0;
        let g_j = g_m * rot_c.transpose();

        let (fx, fy) = (k.fx, k.fy);
        let (x, y, z) = (mu_c.x, mu_c.y, mu_c.z);
        let iz2 = 1.0 / (z * z);
        let iz3 = iz2 / z;
        let mut d_mu_c = Vector3::new(
            -fx * iz2 * g_j[(0, 2)],
            -fy * iz2 * g_j[(1, 2)],
            -fx * iz2 * g_j[(0, 0)] + 2.0 * fx * x * iz3 * g_j[(0, 2)] - fy * iz2 * g_j[(1, 1)]
                + 2.0 * fy * y * iz3 * g_j[(1, 2)],
        );
        let mean_path = jac.transpose() * sg.mean2d;
        d_mu_c += mean_path;
        let d_mu = rot_c.transpose() * d_mu_c;
        out.d_positions[i] = (Vector3::from(out.d_positions[i]) + d_mu).into();

        // pose: d mu_c / d eps = [I | -[mu_c]x]
        let rot_part = mu_c.cross(&mean_path);
        d_pose += nalgebra::Vector6::new(
            mean_path.x,
            mean_path.y,
            mean_path.z,
            rot_part.x,
            rot_part.y,
            rot_part.z,
        );

        // covariance -> log-scales and quaternion
        let q_raw = scene.raw_rotation(i);
        let q_norm = q_raw.norm();
        let q = q_raw / q_norm;
        let r = rotation_from_unit(&q);
        let s2 = scene.log_scale(i).map(|l| (2.0 * l).exp());
        let rt_g_r = r.transpose() * g_sigma * r;
        let mut d_ls = Vector3::from(out.d_log_scales[i]);
        for axis in 0..3 {
            d_ls[axis] += 2.0 * s2[axis] * rt_g_r[(axis, axis)];
        }
        out.d_log_scales[i] = d_ls.into();
        let g_r = g_sigma * r * Matrix3::from_diagonal(&s2) * 2.0;
        let d_qhat = rotation_grad_to_quat(&q, &g_r);
        let d_q = (d_qhat - q * q.dot(&d_qhat)) / q_norm;
        out.d_rotations[i] = (Vector4::from(out.d_rotations[i]) + d_q).into();
    }
    out.d_pose = Twist(d_pose);
    Ok(out)
}

fn rotation_from_unit(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

// Chain dL/dR through R(q) for a unit quaternion (w, x, y, z).
fn rotation_grad_to_quat(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)] + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Vector4::new(dw, dx, dy, dz)
}
